//! Subtractive mixing of the cyan and magenta marker filters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear RGB in `[0, 1]`.
pub type Rgb = [f64; 3];

fn mul(a: Rgb, b: Rgb) -> Rgb {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}

fn pow(a: Rgb, e: f64) -> Rgb {
    [a[0].powf(e), a[1].powf(e), a[2].powf(e)]
}

/// Transmission spectra of the two filter layers and the backlit diffuser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticalFilterModel {
    pub cyan_transmission: Rgb,
    pub magenta_transmission: Rgb,
    /// Filter thickness scale: effective transmission is `t^opacity_gain`.
    pub opacity_gain: f64,
    pub background_color: Rgb,
    /// Upper clamp of the magenta exponent as the layer gap closes.
    pub max_exponent: f64,
}

impl Default for OpticalFilterModel {
    fn default() -> Self {
        Self {
            cyan_transmission: [0.2, 0.85, 0.95],
            magenta_transmission: [0.9, 0.25, 0.85],
            opacity_gain: 1.0,
            background_color: [1.0, 1.0, 1.0],
            max_exponent: 3.0,
        }
    }
}

impl OpticalFilterModel {
    /// Ideal block filters, `(0,1,1)` and `(1,0,1)`.
    pub fn ideal() -> Self {
        Self {
            cyan_transmission: [0.0, 1.0, 1.0],
            magenta_transmission: [1.0, 0.0, 1.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !(unit(&self.cyan_transmission)
            && unit(&self.magenta_transmission)
            && unit(&self.background_color))
        {
            return Err(Error::invalid(
                "filter transmissions and background must lie in [0, 1]",
            ));
        }
        if !(self.opacity_gain >= 0.0 && self.opacity_gain.is_finite()) {
            return Err(Error::invalid("opacity_gain must be >= 0"));
        }
        if !(self.max_exponent >= 1.0 && self.max_exponent.is_finite()) {
            return Err(Error::invalid("max_exponent must be >= 1"));
        }
        Ok(())
    }

    pub fn cyan(&self) -> Rgb {
        pow(self.cyan_transmission, self.opacity_gain)
    }

    pub fn magenta(&self) -> Rgb {
        pow(self.magenta_transmission, self.opacity_gain)
    }

    /// Magenta exponent `g = rest_gap / gap`, clamped to `[1, max_exponent]`.
    pub fn magenta_exponent(&self, layer_gap: f64, rest_gap: f64) -> f64 {
        if layer_gap <= 0.0 {
            return self.max_exponent;
        }
        (rest_gap / layer_gap).clamp(1.0, self.max_exponent)
    }

    pub fn background(&self) -> Rgb {
        self.background_color
    }

    pub fn cyan_only(&self) -> Rgb {
        mul(self.background_color, self.cyan())
    }

    pub fn magenta_only(&self) -> Rgb {
        mul(self.background_color, self.magenta())
    }

    /// Colour where both filters overlap at the given layer gap.
    pub fn mixed(&self, layer_gap: f64, rest_gap: f64) -> Rgb {
        let g = self.magenta_exponent(layer_gap, rest_gap);
        mul(self.cyan_only(), pow(self.magenta(), g))
    }

    /// Area-mean colour of a cyan marker a fraction of which overlaps its
    /// magenta partner.
    pub fn compose_marker_color(
        &self,
        overlap_fraction: f64,
        layer_gap: f64,
        rest_gap: f64,
    ) -> Rgb {
        let f = overlap_fraction.clamp(0.0, 1.0);
        let mixed = self.mixed(layer_gap, rest_gap);
        let cyan = self.cyan_only();
        [0, 1, 2].map(|c| f * mixed[c] + (1.0 - f) * cyan[c])
    }
}
