//! Weight-space interpolation between checkpoints that share a pretrained
//! initialisation.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::seqmodel::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    PairwiseLerp,
    Uniform,
}

/// Weighted combination of checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub inputs: Vec<(ParamVector, f64)>,
    pub mode: MergeMode,
}

fn check_compatible(models: &[&ParamVector]) -> Result<()> {
    let first = models.first().ok_or_else(|| arg("nothing to merge"))?;
    for m in &models[1..] {
        if m.lineage() != first.lineage() || !m.same_shape(first) {
            return Err(Error::Merge(
                "checkpoints do not share a pretrained initialisation".into(),
            ));
        }
    }
    Ok(())
}

impl MergeSpec {
    pub fn lerp(theta_q: ParamVector, theta_d: ParamVector, lambda: f64) -> Self {
        MergeSpec {
            inputs: alloc::vec![(theta_q, 1.0 - lambda), (theta_d, lambda)],
            mode: MergeMode::PairwiseLerp,
        }
    }

    pub fn uniform(models: Vec<ParamVector>) -> Self {
        let w = 1.0 / models.len().max(1) as f64;
        MergeSpec {
            inputs: models.into_iter().map(|m| (m, w)).collect(),
            mode: MergeMode::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let refs: Vec<&ParamVector> = self.inputs.iter().map(|(m, _)| m).collect();
        check_compatible(&refs)?;
        let total: f64 = self.inputs.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(arg("merge weights must sum to 1"));
        }
        match self.mode {
            MergeMode::PairwiseLerp if self.inputs.len() != 2 => {
                Err(arg("pairwise lerp takes exactly two checkpoints"))
            }
            MergeMode::Uniform if self.inputs.len() < 2 => {
                Err(arg("uniform merge takes at least two checkpoints"))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self) -> Result<ParamVector> {
        self.validate()?;
        match self.mode {
            MergeMode::PairwiseLerp => lerp(&self.inputs[0].0, &self.inputs[1].0, self.inputs[1].1),
            MergeMode::Uniform => {
                let models: Vec<ParamVector> = self.inputs.iter().map(|(m, _)| m.clone()).collect();
                uniform_merge(&models)
            }
        }
    }
}

/// `(1 - lambda) * theta_q + lambda * theta_d`, exact at both endpoints.
pub fn lerp(theta_q: &ParamVector, theta_d: &ParamVector, lambda: f64) -> Result<ParamVector> {
    check_compatible(&[theta_q, theta_d])?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(arg("lambda must lie in [0, 1]"));
    }
    if lambda == 0.0 {
        return Ok(theta_q.clone());
    }
    if lambda == 1.0 {
        return Ok(theta_d.clone());
    }
    let mut out = theta_q.clone();
    for (o, (&a, &b)) in out.values.iter_mut().zip(theta_q.values.iter().zip(&theta_d.values)) {
        *o = (1.0 - lambda) * a + lambda * b;
    }
    Ok(out)
}

/// Coordinatewise mean. Inputs are summed in content-hash order, so the result
/// does not depend on the order they are passed in.
pub fn uniform_merge(models: &[ParamVector]) -> Result<ParamVector> {
    if models.len() < 2 {
        return Err(arg("uniform merge takes at least two checkpoints"));
    }
    let refs: Vec<&ParamVector> = models.iter().collect();
    check_compatible(&refs)?;
    let mut order: Vec<(crate::hash::Digest, &ParamVector)> =
        models.iter().map(|m| (m.content_hash(), m)).collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    if order.iter().all(|(h, _)| *h == order[0].0) {
        return Ok(order[0].1.clone());
    }
    let w = 1.0 / models.len() as f64;
    let mut out = order[0].1.clone();
    for (i, o) in out.values.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (_, m) in &order {
            acc += w * m.values[i];
        }
        *o = acc;
    }
    Ok(out)
}

/// The interpolation grid `{0, step, ..., 1}`.
pub fn lambda_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(arg("grid step must lie in (0, 0.5]"));
    }
    let k = libm::round(1.0 / step);
    let mut grid: Vec<f64> = if (k * step - 1.0).abs() < 1e-9 {
        let k = k as usize;
        (0..=k).map(|i| i as f64 / k as f64).collect()
    } else {
        let mut g = Vec::new();
        let mut i = 0usize;
        while (i as f64) * step < 1.0 {
            g.push(i as f64 * step);
            i += 1;
        }
        g.push(1.0);
        g
    };
    grid.dedup();
    Ok(grid)
}

/// Checkpoints along the interpolation grid, each tagged with its `lambda`.
pub fn sweep_lambda(theta_q: &ParamVector, theta_d: &ParamVector, step: f64) -> Result<Vec<(f64, ParamVector)>> {
    lambda_grid(step)?
        .into_iter()
        .map(|l| Ok((l, lerp(theta_q, theta_d, l)?)))
        .collect()
}
