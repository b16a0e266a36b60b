use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{count_components, DigitImage};
use super::stroke::footprint;
use crate::error::{Error, Result};

/// Attempts at cutting a figure into pieces before giving up.
pub const INACTIVE_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbClass {
    Healthy,
    /// Fragmented into several components.
    Inactive,
    /// Locally thickened.
    Focal,
    /// Globally and locally thickened.
    Diffuse,
}

impl PerturbClass {
    pub const ALL: [PerturbClass; 4] = [
        PerturbClass::Healthy,
        PerturbClass::Inactive,
        PerturbClass::Focal,
        PerturbClass::Diffuse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbClass::Healthy => "healthy",
            PerturbClass::Inactive => "inactive",
            PerturbClass::Focal => "focal",
            PerturbClass::Diffuse => "diffuse",
        }
    }

    /// Position in [`PerturbClass::ALL`]; also the four-class bag label.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Focal and diffuse instances make a binary bag positive.
    pub fn is_positive(self) -> bool {
        matches!(self, PerturbClass::Focal | PerturbClass::Diffuse)
    }
}

impl fmt::Display for PerturbClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown perturbation class {s:?}")))
    }
}

/// Applies one perturbation. Every class except healthy needs a skeleton.
pub fn perturb<R: Rng>(img: &DigitImage, cls: PerturbClass, rng: &mut R) -> Result<DigitImage> {
    if cls != PerturbClass::Healthy && img.skeleton.is_empty() {
        return Err(Error::data(format!(
            "{cls} perturbation needs a stroke skeleton"
        )));
    }
    match cls {
        PerturbClass::Healthy => Ok(img.clone()),
        PerturbClass::Inactive => fragment(img, rng),
        PerturbClass::Focal => {
            let disk = draw_disk(img, rng);
            Ok(thicken_locally(img, disk))
        }
        PerturbClass::Diffuse => {
            // Same draws as focal, so diffuse covers focal for a given rng state.
            let disk = draw_disk(img, rng);
            Ok(thicken_locally(&img.dilate(), disk))
        }
    }
}

/// Centre (a skeleton point) and radius of the local thickening.
fn draw_disk<R: Rng>(img: &DigitImage, rng: &mut R) -> ((usize, usize), f64) {
    let centre = img.skeleton[rng.gen_range(0..img.skeleton.len())];
    (centre, rng.gen_range(4.0..=6.0))
}

fn thicken_locally(img: &DigitImage, ((cr, cc), radius): ((usize, usize), f64)) -> DigitImage {
    img.dilate_where(|r, c| {
        let (dr, dc) = (r as f64 - cr as f64, c as f64 - cc as f64);
        dr * dr + dc * dc <= radius * radius
    })
}

/// Cuts 1-3 gaps of 2-4 skeleton points until the figure falls apart.
fn fragment<R: Rng>(img: &DigitImage, rng: &mut R) -> Result<DigitImage> {
    let n = img.skeleton.len();
    for _ in 0..INACTIVE_RETRIES {
        let mut out = img.clone();
        let gaps = rng.gen_range(1..=3);
        for _ in 0..gaps {
            let len = rng.gen_range(2..=4);
            if n < len + 4 {
                continue;
            }
            let start = rng.gen_range(2..=n - len - 2);
            for &p in &img.skeleton[start..start + len] {
                for (r, c) in footprint(p, 2) {
                    out.set(r, c, 0.0);
                }
            }
        }
        if out.foreground_count() > 0 && count_components(&out, 8)? >= 2 {
            return Ok(out);
        }
    }
    Err(Error::data(format!(
        "could not split a {n}-point figure into two components in {INACTIVE_RETRIES} attempts"
    )))
}
