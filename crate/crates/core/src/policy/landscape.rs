use rayon::prelude::*;

use super::{rollout, Policy, RolloutNoise};
use crate::autodiff::Tape;
use crate::empowerment::{EmpowermentEstimator, Estimate, GridSpec, Landscape, LandscapeCell};
use crate::envs::Dynamics;
use crate::error::{Error, Result};
use crate::rng::{indexed_stream_rng, Stream};

/// Empowerment accumulated along policy rollouts: at every grid point the
/// mean over `rollouts` trajectories of `Σ_t Î(s_t)` for `horizon` visited
/// states, starting from the encoded grid point. Rows run in parallel with
/// independent noise streams.
#[allow(clippy::too_many_arguments)]
pub fn accumulated_landscape(
    policy: &Policy,
    est: &EmpowermentEstimator,
    dynamics: &dyn Dynamics,
    grid: &GridSpec,
    horizon: usize,
    rollouts: usize,
    encode: &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync),
    seed: u64,
) -> Result<Landscape> {
    if grid.points1 == 0 || grid.points2 == 0 || horizon == 0 || rollouts == 0 {
        return Err(Error::Validation(
            "accumulated landscape needs grid points, horizon and rollouts ≥ 1".into(),
        ));
    }
    policy.check_compatible(dynamics)?;
    est.check_compatible(dynamics)?;
    let ds = dynamics.state_dim();
    let xs = GridSpec::axis(grid.dim1, grid.points1);
    let ys = GridSpec::axis(grid.dim2, grid.points2);
    let rows: Vec<Vec<LandscapeCell>> = xs
        .par_iter()
        .enumerate()
        .map(|(i, &x)| -> Result<Vec<LandscapeCell>> {
            let mut initial = Vec::with_capacity(ys.len() * rollouts * ds);
            for &y in &ys {
                let s = encode(&[x, y])?;
                if s.len() != ds {
                    return Err(Error::Validation(format!("encoded state has {} values, expected {ds}", s.len())));
                }
                for _ in 0..rollouts {
                    initial.extend_from_slice(&s);
                }
            }
            let batch = ys.len() * rollouts;
            let mut rng = indexed_stream_rng(seed, Stream::MonteCarlo, i as u64);
            let noise = RolloutNoise::sample(&mut rng, est, dynamics, batch, horizon);
            let mut tape = Tape::new();
            let chi = policy.bind(&mut tape, false)?;
            let theta = est.bind(&mut tape, false)?;
            let ctx = dynamics.prepare(&mut tape)?;
            let s0 = tape.constant(initial, &[batch, ds])?;
            let r = rollout(&mut tape, policy, &chi, est, &theta, dynamics, &ctx, s0, &noise)?;
            let mut totals = vec![0.0; batch];
            for &mi in &r.mi {
                for (acc, v) in totals.iter_mut().zip(tape.value(mi)) {
                    *acc += v;
                }
            }
            Ok(ys
                .iter()
                .zip(totals.chunks(rollouts))
                .map(|(&y, chunk)| LandscapeCell {
                    dim1: x,
                    dim2: y,
                    estimate: Estimate::from_samples(chunk),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(Landscape {
        grid: grid.clone(),
        cells: rows.into_iter().flatten().collect(),
    })
}
