use nalgebra::DVector;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::fit::{CiMethod, Dataset, GlmmFit, GlmmOptions, ParamInterval, SIGMA_NAME};
use crate::error::{Error, Result};
use crate::optim::{maximize_loglik, MaximizeOptions, Objective};

/// `f` with coordinate `index` pinned to `value`.
struct Pinned<'a, O: ?Sized> {
    f: &'a O,
    index: usize,
    value: f64,
}

impl<O: Objective + ?Sized> Pinned<'_, O> {
    fn expand(&self, free: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(free.len() + 1);
        for (k, v) in full.iter_mut().enumerate() {
            *v = match k.cmp(&self.index) {
                std::cmp::Ordering::Less => free[k],
                std::cmp::Ordering::Equal => self.value,
                std::cmp::Ordering::Greater => free[k - 1],
            };
        }
        full
    }

    fn shrink(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            full.len() - 1,
            full.iter()
                .enumerate()
                .filter(|&(k, _)| k != self.index)
                .map(|(_, &v)| v),
        )
    }
}

impl<O: Objective + ?Sized> Objective for Pinned<'_, O> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.f.value(&self.expand(x))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.shrink(&self.f.gradient(&self.expand(x)))
    }
}

/// Profile-likelihood interval for coordinate `index` of the maximizer of
/// `f`. Endpoints solve `2(f̂ − f_p(t)) = χ²₁(level)` by bracketing outward
/// in multiples of `scale` and bisecting; the other coordinates are
/// re-optimized at every probe. Fails if a probe finds a likelihood above
/// the claimed maximum, which means the original fit was not a maximum.
pub fn profile_interval<O: Objective + ?Sized>(
    f: &O,
    argmax: &DVector<f64>,
    max_value: f64,
    index: usize,
    scale: f64,
    level: f64,
    opts: &MaximizeOptions,
) -> Result<(f64, f64)> {
    if index >= argmax.len() {
        return Err(Error::InvalidInput(format!("no parameter at index {index}")));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidInput(format!("profile scale must be positive (got {scale})")));
    }
    let cutoff = ChiSquared::new(1.0)
        .map_err(|e| Error::Config(e.to_string()))?
        .inverse_cdf(level);
    let center = argmax[index];

    let mut warm = argmax.clone();
    let deviance = |t: f64, warm: &mut DVector<f64>| -> Result<f64> {
        let pinned = Pinned { f, index, value: t };
        let value = if argmax.len() == 1 {
            f.value(&DVector::from_element(1, t))
        } else {
            let start = pinned.shrink(warm);
            let m = maximize_loglik(&pinned, &start, opts)?;
            if !m.converged {
                return Err(Error::InvalidInput("profile optimizer did not converge".into()));
            }
            *warm = pinned.expand(&m.argmax);
            m.value
        };
        if !value.is_finite() {
            return Err(Error::InvalidInput("profile likelihood is not finite".into()));
        }
        if value > max_value + 1e-3 {
            return Err(Error::InvalidInput(
                "profile found a higher likelihood than the fit".into(),
            ));
        }
        Ok(2.0 * (max_value - value))
    };

    let mut endpoint = |direction: f64| -> Result<f64> {
        warm.copy_from(argmax);
        let mut inside = center;
        let mut mult = 1.0;
        let outside = loop {
            let t = center + direction * mult * scale;
            if deviance(t, &mut warm)? >= cutoff {
                break t;
            }
            inside = t;
            mult *= 2.0;
            if mult > 1024.0 {
                return Err(Error::InvalidInput("profile deviance never reaches the cutoff".into()));
            }
        };
        let (mut lo, mut hi) = (inside, outside);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if deviance(mid, &mut warm)? < cutoff {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo).abs() <= 1e-8 * (1.0 + center.abs()) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    let lower = endpoint(-1.0)?;
    let upper = endpoint(1.0)?;
    Ok((lower, upper))
}

/// Profile interval for one named parameter of a fitted model, falling back
/// to the Wald interval (tagged as such) if profiling fails.
pub fn profile_ci(
    fit: &GlmmFit,
    data: &Dataset,
    param: &str,
    level: f64,
    opts: &GlmmOptions,
) -> Result<ParamInterval> {
    let q = fit.beta.len();
    let index = if param == SIGMA_NAME {
        q
    } else {
        fit.coefficient_names
            .iter()
            .position(|n| n == param)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {param}")))?
    };
    let wald = fit.wald_interval(index, level);
    let scale = if index < q { fit.se_beta[index] } else { fit.se_log_sigma };
    if !fit.converged || fit.boundary || !scale.is_finite() {
        return Ok(wald);
    }
    let objective = opts.objective(data)?;
    match profile_interval(&objective, &fit.theta, fit.loglik, index, scale, level, &opts.maximize()) {
        Ok((lo, hi)) => {
            let (lower, upper) = if index == q { (lo.exp(), hi.exp()) } else { (lo, hi) };
            Ok(ParamInterval {
                param: wald.param,
                estimate: wald.estimate,
                lower,
                upper,
                method: CiMethod::Profile,
            })
        }
        Err(_) => Ok(wald),
    }
}
