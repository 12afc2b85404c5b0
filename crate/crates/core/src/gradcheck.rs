//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::attention::{attention_backward, attention_forward, AttentionConfig, HeadTensor, PeMode};
use crate::error::Result;
use crate::layout::SequenceLayout;
use crate::masks::MaskKind;
use crate::numerics::{Real, Rng};

/// Default central-difference step.
pub const DEFAULT_STEP: Real = 1e-5;

/// Denominator floor of [`relative_error`].
pub const RELATIVE_FLOOR: Real = 1e-6;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time. `x` is
/// restored before returning.
pub fn central_differences<F>(x: &mut [Real], step: Real, mut f: F) -> Vec<Real>
where
    F: FnMut(&[Real]) -> Real,
{
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let plus = f(x);
            x[i] = orig - step;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: Real,
    /// Which input holds the worst element, e.g. `"K[17]"`.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: Real) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares `(analytic, numeric)` pairs named `name[i]`.
pub fn compare(label: impl Into<String>, groups: &[(&str, &[Real], &[Real])]) -> GradCheckReport {
    let mut report = GradCheckReport {
        label: label.into(),
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (name, analytic, numeric) in groups {
        for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let e = relative_error(a, n);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    report
}

/// Checks [`attention_backward`] against central differences of
/// `L = sum(output * upstream)` with respect to every element of Q, K and V.
pub fn check_attention(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    upstream: &HeadTensor,
    layout: &SequenceLayout,
    config: &AttentionConfig,
    step: Real,
) -> Result<GradCheckReport> {
    let fwd = attention_forward(q, k, v, layout, config)?;
    let grads = attention_backward(&fwd.state, upstream)?;
    let loss = |q: &HeadTensor, k: &HeadTensor, v: &HeadTensor| -> Real {
        let out = attention_forward(q, k, v, layout, config).expect("shapes already validated");
        out.output
            .as_slice()
            .iter()
            .zip(upstream.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    let shape = q.shape();
    let rebuild = |x: &[Real]| HeadTensor::from_vec(shape.0, shape.1, shape.2, x.to_vec()).expect("same shape");
    let num_q = central_differences(&mut q.as_slice().to_vec(), step, |x| loss(&rebuild(x), k, v));
    let num_k = central_differences(&mut k.as_slice().to_vec(), step, |x| loss(q, &rebuild(x), v));
    let num_v = central_differences(&mut v.as_slice().to_vec(), step, |x| loss(q, k, &rebuild(x)));
    Ok(compare(
        format!("{} + {}", config.pe_mode, config.mask_kind),
        &[
            ("Q", grads.grad_q.as_slice(), &num_q),
            ("K", grads.grad_k.as_slice(), &num_k),
            ("V", grads.grad_v.as_slice(), &num_v),
        ],
    ))
}

/// Attention gradient check over every position mode and mask kind on one
/// randomly drawn micro case per combination.
pub fn check_all_modes(
    layout: &SequenceLayout,
    num_heads: usize,
    d_head: usize,
    gamma: Real,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let mut rng = Rng::seeded(seed);
    let t = layout.len();
    for pe_mode in PeMode::ALL {
        for mask_kind in MaskKind::ALL {
            let config = AttentionConfig::new(num_heads, d_head)
                .with_pe_mode(pe_mode)
                .with_mask(mask_kind)
                .with_gamma(gamma);
            let q = HeadTensor::random(num_heads, t, d_head, &mut rng);
            let k = HeadTensor::random(num_heads, t, d_head, &mut rng);
            let v = HeadTensor::random(num_heads, t, d_head, &mut rng);
            let up = HeadTensor::random(num_heads, t, d_head, &mut rng);
            reports.push(check_attention(&q, &k, &v, &up, layout, &config, DEFAULT_STEP)?);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[cfg(not(feature = "f32"))]
    fn differences_of_a_quadratic() {
        let mut x = vec![1.0, -2.0, 0.5];
        let g = central_differences(&mut x, 1e-4, |x| x.iter().map(|v| v * v).sum());
        assert_eq!(x, vec![1.0, -2.0, 0.5]);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn spec_micro_case_fwbc_dual() {
        use crate::layout::build_layout;
        // T = 5, d_head = 4, two heads, gamma = 1
        let layout = build_layout(1, 2, 2, 0).unwrap();
        let cfg = AttentionConfig::new(2, 4)
            .with_mask(MaskKind::FwBlockCausal)
            .with_pe_mode(PeMode::DualRope)
            .with_gamma(1.0);
        let mut rng = Rng::seeded(2024);
        let mut draw = || HeadTensor::random(2, 5, 4, &mut rng);
        let (q, k, v, up) = (draw(), draw(), draw(), draw());
        let r = check_attention(&q, &k, &v, &up, &layout, &cfg, 1e-5).unwrap();
        assert_eq!(r.checked, 3 * 2 * 5 * 4);
        assert!(r.passes(1e-4), "{r:?}");
    }
}
