use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{count_components, DigitImage};
use super::perturb::{perturb, PerturbClass};
use super::stroke::gen_stroke_digit;
use crate::error::{Error, Result};
use crate::model::{Bag, Instance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// Positive bags hold some focal/diffuse instances among healthy/inactive ones.
    Binary,
    /// Every instance of a bag has the same class; the bag label is that class.
    FourClass,
}

impl LabelScheme {
    pub fn classes(self) -> usize {
        match self {
            LabelScheme::Binary => 2,
            LabelScheme::FourClass => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BagSpec {
    pub bag_size: usize,
    pub scheme: LabelScheme,
    /// Inclusive range of focal/diffuse instances in a positive binary bag.
    pub positive_count: [usize; 2],
    /// Chance that [`build_bag`] draws a positive (binary) bag.
    pub positive_bag_prob: f64,
    /// Share of inactive among the healthy/inactive background instances.
    pub inactive_prob: f64,
    /// Share of diffuse among the focal/diffuse instances.
    pub diffuse_prob: f64,
    /// Foreground pixels are scaled by a factor drawn from `[1 - j, 1]`. Off by default.
    pub intensity_jitter: f64,
}

impl Default for BagSpec {
    fn default() -> Self {
        Self {
            bag_size: 100,
            scheme: LabelScheme::Binary,
            positive_count: [1, 10],
            positive_bag_prob: 0.5,
            inactive_prob: 0.5,
            diffuse_prob: 0.5,
            intensity_jitter: 0.0,
        }
    }
}

impl BagSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bag_size == 0 {
            return Err(Error::config("bag_size must be at least 1"));
        }
        let [lo, hi] = self.positive_count;
        if self.scheme == LabelScheme::Binary && (lo == 0 || lo > hi || hi > self.bag_size) {
            return Err(Error::config(format!(
                "positive_count {:?} must satisfy 1 <= lo <= hi <= bag_size = {}",
                self.positive_count, self.bag_size
            )));
        }
        for (name, p) in [
            ("positive_bag_prob", self.positive_bag_prob),
            ("inactive_prob", self.inactive_prob),
            ("diffuse_prob", self.diffuse_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(0.0..0.5).contains(&self.intensity_jitter) {
            return Err(Error::config(format!(
                "intensity_jitter must be in [0, 0.5), got {}",
                self.intensity_jitter
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.scheme.classes()
    }
}

/// Aux label of an image: 1 if it has more than one 8-connected component.
pub fn aux_label(img: &DigitImage) -> Result<usize> {
    Ok(usize::from(count_components(img, 8)? > 1))
}

/// Figures tried per instance before a perturbation error is surfaced.
const FRESH_FIGURES: usize = 5;

fn make_instance<R: Rng>(
    cls: PerturbClass,
    spec: &BagSpec,
    rng: &mut R,
) -> Result<(Instance, usize)> {
    // A few figures (tight loops, crossings) resist fragmentation; draw a
    // new figure rather than failing the whole bag.
    let mut img = perturb(&gen_stroke_digit(rng), cls, rng);
    for _ in 1..FRESH_FIGURES {
        if img.is_ok() {
            break;
        }
        img = perturb(&gen_stroke_digit(rng), cls, rng);
    }
    let mut img = img?;
    if spec.intensity_jitter > 0.0 {
        let f = 1.0 - rng.gen_range(0.0..spec.intensity_jitter);
        img.pixels.iter_mut().for_each(|v| *v *= f);
    }
    let aux = aux_label(&img)?;
    let inst = Instance::new(img.height, img.width, img.pixels)?.with_meta("class", cls.as_str());
    Ok((inst, aux))
}

/// A bag with a random label (see [`BagSpec::positive_bag_prob`]).
pub fn build_bag<R: Rng>(spec: &BagSpec, id: u64, rng: &mut R) -> Result<Bag> {
    spec.validate()?;
    let label = match spec.scheme {
        LabelScheme::Binary => usize::from(rng.gen_bool(spec.positive_bag_prob)),
        LabelScheme::FourClass => rng.gen_range(0..4),
    };
    build_bag_with_label(spec, label, id, rng)
}

pub fn build_bag_with_label<R: Rng>(
    spec: &BagSpec,
    label: usize,
    id: u64,
    rng: &mut R,
) -> Result<Bag> {
    spec.validate()?;
    if label >= spec.classes() {
        return Err(Error::data(format!(
            "label {label} out of range for {} classes",
            spec.classes()
        )));
    }
    let n = spec.bag_size;
    let classes: Vec<PerturbClass> = match spec.scheme {
        LabelScheme::FourClass => vec![PerturbClass::from_index(label).unwrap(); n],
        LabelScheme::Binary => {
            let mut cls: Vec<PerturbClass> = (0..n)
                .map(|_| {
                    if rng.gen_bool(spec.inactive_prob) {
                        PerturbClass::Inactive
                    } else {
                        PerturbClass::Healthy
                    }
                })
                .collect();
            if label == 1 {
                let k = rng.gen_range(spec.positive_count[0]..=spec.positive_count[1]);
                for i in sample(rng, n, k) {
                    cls[i] = if rng.gen_bool(spec.diffuse_prob) {
                        PerturbClass::Diffuse
                    } else {
                        PerturbClass::Focal
                    };
                }
            }
            cls
        }
    };
    let mut instances = Vec::with_capacity(n);
    let mut aux = Vec::with_capacity(n);
    for cls in classes {
        let (inst, a) = make_instance(cls, spec, rng)?;
        instances.push(inst);
        aux.push(a);
    }
    Bag::new(id, instances, label, aux)
}

/// Perturbation class recorded in an instance's metadata.
pub fn instance_class(inst: &Instance) -> Option<PerturbClass> {
    inst.meta.get("class").and_then(|s| s.parse().ok())
}
