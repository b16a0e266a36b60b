//! Auxiliary-task gradient weighting.
//!
//! Every strategy reduces to one rule on the shared-partition gradients:
//!
//! ```text
//! g_combined = main_scale * g_main + w_used * g_aux
//! ```
//!
//! `main_scale` is 1 for everything except WL. The strategies differ only in
//! how `w_used` is chosen and what running state they carry between steps.
//! All inputs are loss gradients; negating both (log-likelihood gradients)
//! gives the negated combination, so the parameter update is the same.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_dot, grad_norm, GradVector};
use crate::error::{Error, Result};

/// Added to the GradNorm denominator and the OL-AUX normaliser.
pub const NORM_EPS: f64 = 1e-12;
/// Added to the smoothed aux loss in the AdaLoss weight.
pub const ADALOSS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Main task only.
    None,
    Uniform,
    /// Weighting that decays geometrically with the epoch.
    Wl,
    GradNorm,
    AdaLoss,
    CosSim,
    OlAux,
    /// Gradient descent on `||g_main - w g_aux||^2` with respect to `w`.
    Atmil,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::None,
        Strategy::Uniform,
        Strategy::Wl,
        Strategy::GradNorm,
        Strategy::AdaLoss,
        Strategy::CosSim,
        Strategy::OlAux,
        Strategy::Atmil,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Uniform => "uniform",
            Strategy::Wl => "wl",
            Strategy::GradNorm => "gradnorm",
            Strategy::AdaLoss => "adaloss",
            Strategy::CosSim => "cossim",
            Strategy::OlAux => "olaux",
            Strategy::Atmil => "atmil",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
                Error::config(format!(
                    "unknown strategy {s:?}, expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Learning rate of the task weight (ATMIL, OL-AUX).
    pub beta: f64,
    /// WL decay base.
    pub gamma: f64,
    pub w_init: f64,
    pub w_max: f64,
    /// Decay of the GradNorm ratio and AdaLoss loss averages.
    pub ema_decay: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Atmil,
            beta: 0.05,
            gamma: 0.5,
            w_init: 1.0,
            w_max: 10.0,
            ema_decay: 0.9,
        }
    }
}

impl StrategyConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!(
                "gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.w_max > 0.0 && self.w_max.is_finite()) {
            return Err(Error::config(format!(
                "w_max must be positive, got {}",
                self.w_max
            )));
        }
        if !(0.0..=self.w_max).contains(&self.w_init) {
            return Err(Error::config(format!(
                "w_init {} must lie in [0, w_max = {}]",
                self.w_init, self.w_max
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeightState {
    pub w: f64,
    pub step: u64,
    pub epoch: u64,
    pub ema_aux_loss: f64,
    pub ema_ratio: f64,
}

impl TaskWeightState {
    pub fn new(cfg: &StrategyConfig) -> Self {
        Self {
            w: cfg.w_init,
            step: 0,
            epoch: 0,
            ema_aux_loss: 0.0,
            ema_ratio: 0.0,
        }
    }
}

/// Shared-partition gradients and losses of one bag.
#[derive(Debug, Clone, Copy)]
pub struct CombineInput<'a> {
    pub g_main: &'a GradVector,
    pub g_aux: &'a GradVector,
    pub loss_main: f64,
    pub loss_aux: f64,
    /// Completed epochs before this step (0 during the first epoch).
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    pub dot: f64,
    pub norm_main: f64,
    pub norm_aux: f64,
    /// 0 when either gradient is the zero vector.
    pub cosine: f64,
}

impl GradStats {
    pub fn of(input: &CombineInput) -> Result<Self> {
        let dot = grad_dot(input.g_main, input.g_aux)?;
        let norm_main = grad_norm(input.g_main);
        let norm_aux = grad_norm(input.g_aux);
        let cosine = if norm_main > 0.0 && norm_aux > 0.0 {
            dot / (norm_main * norm_aux)
        } else {
            0.0
        };
        Ok(Self {
            dot,
            norm_main,
            norm_aux,
            cosine,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombineOutput {
    pub g_combined: GradVector,
    pub w_used: f64,
    /// Factor on `g_main`; differs from 1 only under WL.
    pub main_scale: f64,
    pub stats: GradStats,
    /// The strategy proposed a weight outside `[0, w_max]`.
    pub clamped: bool,
}

fn clamp_w(w: f64, cfg: &StrategyConfig) -> (f64, bool) {
    let c = w.clamp(0.0, cfg.w_max);
    (c, c != w)
}

fn check_input(input: &CombineInput) -> Result<()> {
    if !input.g_main.same_layout(input.g_aux) {
        return Err(Error::usage(format!(
            "main and aux gradients have different layouts ({} vs {} values)",
            input.g_main.len(),
            input.g_aux.len()
        )));
    }
    if input.g_main.has_non_finite() || input.g_aux.has_non_finite() {
        return Err(Error::numeric(format!(
            "non-finite gradient entry (main: {}, aux: {})",
            input.g_main.has_non_finite(),
            input.g_aux.has_non_finite()
        )));
    }
    if !input.loss_main.is_finite() || !input.loss_aux.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss (main {}, aux {})",
            input.loss_main, input.loss_aux
        )));
    }
    Ok(())
}

/// One ATMIL step: `w + 2 beta (g_a . g_m - w ||g_a||^2)`, clamped.
pub fn update_w_atmil(
    input: &CombineInput,
    state: &TaskWeightState,
    cfg: &StrategyConfig,
) -> Result<f64> {
    let dot = grad_dot(input.g_aux, input.g_main)?;
    let sq = grad_dot(input.g_aux, input.g_aux)?;
    Ok(clamp_w(state.w + 2.0 * cfg.beta * (dot - state.w * sq), cfg).0)
}

/// `(main weight, aux weight) = (1 - gamma^epoch, gamma^epoch)`.
pub fn update_w_wl(epoch: u64, cfg: &StrategyConfig) -> (f64, f64) {
    let aux = cfg.gamma.powi(epoch.min(i32::MAX as u64) as i32);
    (1.0 - aux, aux)
}

/// Returns the new weight and the updated ratio average. A zero aux
/// gradient leaves both unchanged.
pub fn update_w_gradnorm(
    input: &CombineInput,
    state: &TaskWeightState,
    cfg: &StrategyConfig,
) -> (f64, f64) {
    let norm_aux = grad_norm(input.g_aux);
    if norm_aux == 0.0 {
        return (state.w, state.ema_ratio);
    }
    let target = grad_norm(input.g_main) / (norm_aux + NORM_EPS);
    let ema = cfg.ema_decay * state.ema_ratio + (1.0 - cfg.ema_decay) * target;
    (clamp_w(ema, cfg).0, ema)
}

/// Returns the new weight and the updated aux-loss average.
pub fn update_w_adaloss(
    input: &CombineInput,
    state: &TaskWeightState,
    cfg: &StrategyConfig,
) -> (f64, f64) {
    let ema = cfg.ema_decay * state.ema_aux_loss + (1.0 - cfg.ema_decay) * input.loss_aux;
    (clamp_w(1.0 / (ema + ADALOSS_EPS), cfg).0, ema)
}

pub fn update_w_cossim(input: &CombineInput) -> Result<f64> {
    let stats = GradStats::of(input)?;
    Ok(if stats.cosine > 0.0 { 1.0 } else { 0.0 })
}

/// `w + beta * cos(g_main, g_aux)`, clamped.
pub fn update_w_olaux(
    input: &CombineInput,
    state: &TaskWeightState,
    cfg: &StrategyConfig,
) -> Result<f64> {
    let dot = grad_dot(input.g_main, input.g_aux)?;
    let denom = grad_norm(input.g_main) * grad_norm(input.g_aux) + NORM_EPS;
    Ok(clamp_w(state.w + cfg.beta * dot / denom, cfg).0)
}

/// Chooses the aux weight for this step and combines the shared gradients.
///
/// The returned state has `step` advanced by one. On error the caller's
/// state is untouched and the step should be skipped.
pub fn combine(
    input: &CombineInput,
    state: &TaskWeightState,
    cfg: &StrategyConfig,
) -> Result<(CombineOutput, TaskWeightState)> {
    check_input(input)?;
    let stats = GradStats::of(input)?;
    let mut next = state.clone();
    next.step += 1;
    next.epoch = state.epoch.max(input.epoch);

    let mut main_scale = 1.0;
    let raw = match cfg.strategy {
        Strategy::None => 0.0,
        Strategy::Uniform => 1.0,
        Strategy::Wl => {
            let (m, a) = update_w_wl(input.epoch, cfg);
            main_scale = m;
            a
        }
        Strategy::GradNorm => {
            if stats.norm_aux == 0.0 {
                state.w
            } else {
                let target = stats.norm_main / (stats.norm_aux + NORM_EPS);
                next.ema_ratio = cfg.ema_decay * state.ema_ratio + (1.0 - cfg.ema_decay) * target;
                next.ema_ratio
            }
        }
        Strategy::AdaLoss => {
            next.ema_aux_loss =
                cfg.ema_decay * state.ema_aux_loss + (1.0 - cfg.ema_decay) * input.loss_aux;
            1.0 / (next.ema_aux_loss + ADALOSS_EPS)
        }
        Strategy::CosSim => {
            if stats.cosine > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Strategy::OlAux => {
            state.w + cfg.beta * stats.dot / (stats.norm_main * stats.norm_aux + NORM_EPS)
        }
        Strategy::Atmil => {
            let sq = grad_dot(input.g_aux, input.g_aux)?;
            state.w + 2.0 * cfg.beta * (stats.dot - state.w * sq)
        }
    };
    let (w_used, clamped) = clamp_w(raw, cfg);
    next.w = w_used;

    let g_combined = if w_used == 0.0 && main_scale == 1.0 {
        input.g_main.clone()
    } else if main_scale == 1.0 {
        input.g_main.add_scaled(w_used, input.g_aux)?
    } else {
        input
            .g_main
            .scaled(main_scale)
            .add_scaled(w_used, input.g_aux)?
    };
    Ok((
        CombineOutput {
            g_combined,
            w_used,
            main_scale,
            stats,
            clamped,
        },
        next,
    ))
}

/// One row of the per-step diagnostics log. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: u64,
    pub epoch: u64,
    pub strategy: Strategy,
    pub w_used: f64,
    pub main_scale: f64,
    pub dot: f64,
    pub norm_main: f64,
    pub norm_aux: f64,
    pub cosine: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub clamped: bool,
}

impl DiagnosticsRecord {
    pub const COLUMNS: [&'static str; 12] = [
        "step",
        "epoch",
        "strategy",
        "w_used",
        "main_scale",
        "dot",
        "norm_main",
        "norm_aux",
        "cosine",
        "loss_main",
        "loss_aux",
        "clamped",
    ];

    pub fn new(input: &CombineInput, out: &CombineOutput, step: u64, strategy: Strategy) -> Self {
        Self {
            step,
            epoch: input.epoch,
            strategy,
            w_used: out.w_used,
            main_scale: out.main_scale,
            dot: out.stats.dot,
            norm_main: out.stats.norm_main,
            norm_aux: out.stats.norm_aux,
            cosine: out.stats.cosine,
            loss_main: input.loss_main,
            loss_aux: input.loss_aux,
            clamped: out.clamped,
        }
    }
}

/// CSV sink for [`DiagnosticsRecord`]s with a header row.
pub struct DiagnosticsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl DiagnosticsWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(File::create(path)?))
    }
}

impl<W: Write> DiagnosticsWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(out),
        }
    }

    pub fn write(&mut self, rec: &DiagnosticsRecord) -> Result<()> {
        self.inner.serialize(rec)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}
