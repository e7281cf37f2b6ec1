//! Central finite-difference gradient checking in 64-bit.

use std::fmt;

use super::params::{ParamStore, Probe};
use crate::{Error, Result};

pub const FD_EPS: f64 = 1e-5;

/// Gradient magnitudes below this are treated as zero when normalizing.
const SCALE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU or max-selection boundary;
    /// the central difference is meaningless there and they are left out.
    pub kinks: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over
    /// the checked entries of this parameter.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "  {:<48} n={:<6} kinks={:<4} rel={:.3e} abs={:.3e}",
                p.name, p.checked, p.kinks, p.rel_error, p.max_abs_error
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (tol {:.0e}): {}",
            self.max_rel_error(),
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Multiplies analytic gradients before comparison (negative control).
    pub corrupt_scale: Option<f64>,
    /// Upper bound on entries checked per parameter; larger parameters are
    /// probed at evenly strided positions.
    pub max_entries: Option<usize>,
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            eps: FD_EPS,
            tol,
            corrupt_scale: None,
            max_entries: None,
        }
    }
}

/// Compares analytic and numeric gradients of a scalar function of the
/// trainable parameters in `store`.
///
/// `loss(store, backward)` must evaluate deterministically; when `backward`
/// is true it must also add the analytic gradients into the store. Entries
/// whose perturbed evaluations land on a different branch signature than
/// the unperturbed one are counted as kinks and not compared.
pub fn grad_check(
    store: &mut ParamStore<f64>,
    opts: &GradCheckOptions,
    mut loss: impl FnMut(&mut ParamStore<f64>, bool) -> Result<Probe>,
) -> Result<GradCheckReport> {
    store.zero_grad();
    let base = loss(store, true)?;
    if !base.loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {}", base.loss)));
    }
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic: Vec<f64> = store
            .get(id)
            .grad
            .data()
            .iter()
            .map(|g| g * opts.corrupt_scale.unwrap_or(1.0))
            .collect();
        let n = analytic.len();
        let positions: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(positions.len());
        let mut kinks = 0;
        for &i in &positions {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let plus = loss(store, false)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let minus = loss(store, false)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let d = (plus.loss - minus.loss) / (2.0 * opts.eps);
            if !d.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite difference for {}[{i}]",
                    store.get(id).name
                )));
            }
            if plus.signature != base.signature || minus.signature != base.signature {
                kinks += 1;
                numeric.push(None);
            } else {
                numeric.push(Some(d));
            }
        }
        let mut scale = SCALE_FLOOR;
        let mut max_abs: f64 = 0.0;
        for (k, &i) in positions.iter().enumerate() {
            let a = analytic[i];
            if !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite analytic gradient for {}[{i}]",
                    store.get(id).name
                )));
            }
            let Some(num) = numeric[k] else { continue };
            scale = scale.max(a.abs()).max(num.abs());
            max_abs = max_abs.max((a - num).abs());
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            checked: positions.len() - kinks,
            kinks,
            max_abs_error: max_abs,
            rel_error: max_abs / scale,
        });
    }
    Ok(GradCheckReport {
        params,
        tol: opts.tol,
    })
}
