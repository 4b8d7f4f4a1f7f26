use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EmpowermentEstimator, Estimate};
use crate::envs::Dynamics;
use crate::error::{Error, Result};
use crate::rng::{indexed_stream_rng, Stream};

/// Regular 2-D grid over interpretable coordinates, endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim1: [f64; 2],
    pub dim2: [f64; 2],
    pub points1: usize,
    pub points2: usize,
}

impl GridSpec {
    pub fn axis(range: [f64; 2], points: usize) -> Vec<f64> {
        if points == 1 {
            return vec![(range[0] + range[1]) / 2.0];
        }
        (0..points)
            .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (points - 1) as f64)
            .collect()
    }

    /// Rejects empty grids and ranges outside `bounds` (one `(lo, hi)` per axis).
    pub fn validate(&self, bounds: &[(f64, f64)]) -> Result<()> {
        if self.points1 == 0 || self.points2 == 0 {
            return Err(Error::Validation("grid needs at least one point per axis".into()));
        }
        if bounds.len() < 2 {
            return Err(Error::Validation("landscape grids need a two-dimensional coordinate space".into()));
        }
        for (axis, (range, &(lo, hi))) in [self.dim1, self.dim2].iter().zip(bounds).enumerate() {
            if !(range[0] <= range[1]) || range[0] < lo - 1e-12 || range[1] > hi + 1e-12 {
                return Err(Error::Validation(format!(
                    "grid axis {} range {range:?} lies outside the environment bounds [{lo}, {hi}]",
                    axis + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeCell {
    pub dim1: f64,
    pub dim2: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub grid: GridSpec,
    /// Row-major: `dim1` varies slowest.
    pub cells: Vec<LandscapeCell>,
}

impl Landscape {
    pub fn argmax(&self) -> LandscapeCell {
        *self
            .cells
            .iter()
            .max_by(|a, b| a.estimate.mean.total_cmp(&b.estimate.mean))
            .expect("landscape has cells")
    }

    pub fn at(&self, i: usize, j: usize) -> &LandscapeCell {
        &self.cells[i * self.grid.points2 + j]
    }

    /// Columns `dim1,dim2,empowerment_nats,stderr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["dim1", "dim2", "empowerment_nats", "stderr"]).map_err(err)?;
        for c in &self.cells {
            let se = c.estimate.stderr.map(|s| s.to_string()).unwrap_or_default();
            w.write_record(&[c.dim1.to_string(), c.dim2.to_string(), c.estimate.mean.to_string(), se])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Estimates the bound at every grid point. `encode` maps grid coordinates to
/// an estimator state (identity for analytic dynamics, the filter for latent
/// ones). Rows are evaluated in parallel with independent noise streams.
pub fn empowerment_landscape(
    est: &EmpowermentEstimator,
    dynamics: &dyn Dynamics,
    grid: &GridSpec,
    samples: usize,
    encode: &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync),
    seed: u64,
) -> Result<Landscape> {
    if grid.points1 == 0 || grid.points2 == 0 {
        return Err(Error::Validation("grid needs at least one point per axis".into()));
    }
    let xs = GridSpec::axis(grid.dim1, grid.points1);
    let ys = GridSpec::axis(grid.dim2, grid.points2);
    let rows: Vec<Vec<LandscapeCell>> = xs
        .par_iter()
        .enumerate()
        .map(|(i, &x)| -> Result<Vec<LandscapeCell>> {
            let states = ys.iter().map(|&y| encode(&[x, y])).collect::<Result<Vec<_>>>()?;
            let mut rng = indexed_stream_rng(seed, Stream::MonteCarlo, i as u64);
            let est_row = est.estimate_many(dynamics, &states, samples, &mut rng)?;
            Ok(ys
                .iter()
                .zip(est_row)
                .map(|(&y, estimate)| LandscapeCell {
                    dim1: x,
                    dim2: y,
                    estimate,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(Landscape {
        grid: grid.clone(),
        cells: rows.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use crate::empowerment::{EstimatorConfig, SourceConfig};
    use crate::envs::StepContext;
    use crate::networks::{Activation, LayerSpec};
    use crate::rng::stream_rng;

    /// Successor independent of the action.
    struct Deaf;

    impl Dynamics for Deaf {
        fn state_dim(&self) -> usize {
            2
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn action_bound(&self) -> Option<&[f64]> {
            Some(&[1.0])
        }
        fn step(&self, tape: &mut Tape, _: &StepContext, state: Var, _action: Var, noise: Var) -> Result<Var> {
            let n = tape.scale(noise, 0.1);
            Ok(tape.add(state, n)?)
        }
    }

    #[test]
    fn axes_include_endpoints() {
        assert_eq!(GridSpec::axis([-1.0, 1.0], 3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(GridSpec::axis([2.0, 4.0], 1), vec![3.0]);
    }

    #[test]
    fn out_of_bounds_grid_is_rejected() {
        let g = GridSpec {
            dim1: [-4.0, 4.0],
            dim2: [-1.0, 1.0],
            points1: 3,
            points2: 3,
        };
        assert!(g.validate(&[(-3.2, 3.2), (-8.0, 8.0)]).is_err());
        assert!(g.validate(&[(-5.0, 5.0), (-8.0, 8.0)]).is_ok());
    }

    #[test]
    fn action_independent_dynamics_have_no_empowerment_after_training() {
        let hidden = vec![LayerSpec {
            width: 8,
            activation: Activation::Tanh,
        }];
        let cfg = EstimatorConfig {
            source: SourceConfig::Learned { hidden: hidden.clone() },
            planner_hidden: hidden,
            ..Default::default()
        };
        let mut est = EmpowermentEstimator::new(cfg, &Deaf, &mut stream_rng(1, Stream::Init)).unwrap();
        let mut sampler = |rng: &mut crate::rng::StreamRng, n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| crate::rng::uniform_in(rng, &[(-1.0, 1.0), (-1.0, 1.0)])).collect()
        };
        let tc = crate::empowerment::SourceTrainConfig {
            iterations: 150,
            learning_rate: 3e-3,
            ..Default::default()
        };
        crate::empowerment::train_source_planner(&mut est, &Deaf, &mut sampler, &tc, &mut stream_rng(1, Stream::MonteCarlo)).unwrap();
        let grid = GridSpec {
            dim1: [-1.0, 1.0],
            dim2: [-1.0, 1.0],
            points1: 4,
            points2: 4,
        };
        let land = empowerment_landscape(&est, &Deaf, &grid, 256, &|x| Ok(x.to_vec()), 3).unwrap();
        assert_eq!(land.cells.len(), 16);
        for c in &land.cells {
            // the bound can only be ≤ 0 in expectation here
            assert!(c.estimate.mean < 3.0 * c.estimate.stderr.unwrap() + 0.02, "{c:?}");
            assert!(c.estimate.mean > -0.2, "{c:?}");
        }
    }

    #[test]
    fn landscape_is_reproducible() {
        let est = EmpowermentEstimator::new(EstimatorConfig::default(), &Deaf, &mut stream_rng(2, Stream::Init)).unwrap();
        let grid = GridSpec {
            dim1: [0.0, 1.0],
            dim2: [0.0, 1.0],
            points1: 2,
            points2: 3,
        };
        let a = empowerment_landscape(&est, &Deaf, &grid, 8, &|x| Ok(x.to_vec()), 5).unwrap();
        let b = empowerment_landscape(&est, &Deaf, &grid, 8, &|x| Ok(x.to_vec()), 5).unwrap();
        assert_eq!(a.cells, b.cells);
        assert_eq!(a.at(1, 2).dim1, 1.0);
        assert_eq!(a.at(1, 2).dim2, 1.0);
    }
}
