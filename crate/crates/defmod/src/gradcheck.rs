//! Central finite-difference verification of analytic gradients.
//!
//! Runs in f64 only; finite differences in f32 drown in rounding noise.
//! Failures are reported, not thrown: callers inspect the report and decide.

use crate::graph::{Graph, ValueId};
use crate::tensor::{NumericsError, Tensor};

/// Worst relative error observed for one checked input.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub input: usize,
    pub max_rel_err: f64,
    pub at_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare analytic gradients of a scalar-valued computation against
/// (f(x + eps) - f(x - eps)) / (2 eps), elementwise over every input.
///
/// The closure must rebuild the computation from the leaves it is given, so
/// that perturbed inputs flow through the entire forward pass.
pub fn grad_check<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Graph<f64>, &[ValueId]) -> Result<ValueId, NumericsError>,
{
    // Analytic pass: all inputs require grad.
    let mut g = Graph::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(NumericsError::Config(
            "grad_check requires a scalar output".into(),
        ));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>], f: &mut F| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let ids: Vec<ValueId> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut entries = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut worst_idx = 0usize;
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = eval(&work, &mut f)?;
            work[i].data_mut()[e] = orig - eps;
            let minus = eval(&work, &mut f)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic[i][e], numeric);
            if err > worst {
                worst = err;
                worst_idx = e;
            }
        }
        entries.push(GradCheckEntry {
            input: i,
            max_rel_err: worst,
            at_index: worst_idx,
        });
    }
    Ok(GradCheckReport { entries })
}
