//! Trajectory datasets collected with a uniform random policy.
//!
//! Two on-disk forms carry the same content: a CSV file with a `#` header line
//! followed by rows `episode,t,x…,u…` (actions empty on the final row of each
//! episode), and the checkpoint container with `observations` `[E, H+1, n_x]`
//! and `actions` `[E, H, n_u]` arrays.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Env, EnvKind};
use crate::error::{Error, Result};
use crate::networks::{Array, Checkpoint};
use crate::rng::{indexed_stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `horizon + 1` observations.
    pub observations: Vec<Vec<f64>>,
    /// `horizon` actions; action `t` moves observation `t` to `t + 1`.
    pub actions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub env: EnvKind,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

/// Rolls out the uniform random policy from the reset distribution.
pub fn generate_dataset(env: &Env, episodes: usize, horizon: usize, seed: u64) -> Result<Dataset> {
    if horizon == 0 {
        return Err(Error::Validation("dataset horizon must be ≥ 1".into()));
    }
    if episodes == 0 {
        return Err(Error::Validation("dataset needs at least one episode".into()));
    }
    let eps = (0..episodes)
        .map(|e| {
            let mut rng = indexed_stream_rng(seed, Stream::Data, e as u64);
            let mut state = env.reset(&mut rng);
            let mut observations = vec![env.observe(&state, &mut rng)];
            let mut actions = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let a = env.uniform_action(&mut rng);
                let noise = env.sample_noise(&mut rng);
                state = env.step_values(&state, &a, &noise);
                observations.push(env.observe(&state, &mut rng));
                actions.push(a);
            }
            Episode { observations, actions }
        })
        .collect();
    Ok(Dataset {
        header: DatasetHeader {
            env: env.kind(),
            obs_dim: env.obs_dim(),
            action_dim: env.action_dim(),
            horizon,
            episodes,
            seed,
        },
        episodes: eps,
    })
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if self.episodes.is_empty() || self.episodes.len() != h.episodes {
            return Err(Error::Validation(format!(
                "dataset declares {} episodes but holds {}",
                h.episodes,
                self.episodes.len()
            )));
        }
        for (i, ep) in self.episodes.iter().enumerate() {
            let ok = ep.observations.len() == h.horizon + 1
                && ep.actions.len() == h.horizon
                && ep.observations.iter().all(|o| o.len() == h.obs_dim)
                && ep.actions.iter().all(|a| a.len() == h.action_dim);
            if !ok {
                return Err(Error::Validation(format!("episode {i} does not match the dataset header")));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let h = &self.header;
        let meta = toml::to_string(h).map_err(|e| Error::Config(e.to_string()))?;
        let mut ckpt = Checkpoint::new(meta);
        let obs = self.episodes.iter().flat_map(|e| e.observations.iter().flatten().copied()).collect();
        let act = self.episodes.iter().flat_map(|e| e.actions.iter().flatten().copied()).collect();
        ckpt.insert("observations", Array::new(vec![h.episodes, h.horizon + 1, h.obs_dim], obs)?);
        ckpt.insert("actions", Array::new(vec![h.episodes, h.horizon, h.action_dim], act)?);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path) -> Result<Self> {
        let header: DatasetHeader =
            toml::from_str(&ckpt.metadata).map_err(|e| Error::format(origin, e.to_string()))?;
        let get = |name: &str, shape: Vec<usize>| -> Result<&Array> {
            let arr = ckpt
                .get(name)
                .ok_or_else(|| Error::format(origin, format!("missing array {name}")))?;
            if arr.shape != shape {
                return Err(Error::format(origin, format!("array {name} has shape {:?}, expected {shape:?}", arr.shape)));
            }
            Ok(arr)
        };
        let obs = get("observations", vec![header.episodes, header.horizon + 1, header.obs_dim])?;
        let act = get("actions", vec![header.episodes, header.horizon, header.action_dim])?;
        let episodes = (0..header.episodes)
            .map(|e| {
                let o = &obs.data[e * (header.horizon + 1) * header.obs_dim..(e + 1) * (header.horizon + 1) * header.obs_dim];
                let a = &act.data[e * header.horizon * header.action_dim..(e + 1) * header.horizon * header.action_dim];
                Episode {
                    observations: o.chunks(header.obs_dim).map(<[f64]>::to_vec).collect(),
                    actions: a.chunks(header.action_dim).map(<[f64]>::to_vec).collect(),
                }
            })
            .collect();
        let ds = Dataset { header, episodes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let h = &self.header;
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(
            file,
            "# env={} obs_dim={} action_dim={} horizon={} episodes={} seed={}",
            h.env.as_str(),
            h.obs_dim,
            h.action_dim,
            h.horizon,
            h.episodes,
            h.seed
        )
        .map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut cols = vec!["episode".to_string(), "t".to_string()];
        cols.extend((0..h.obs_dim).map(|i| format!("x{i}")));
        cols.extend((0..h.action_dim).map(|i| format!("u{i}")));
        let csv_err = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(&cols).map_err(csv_err)?;
        for (e, ep) in self.episodes.iter().enumerate() {
            for (t, obs) in ep.observations.iter().enumerate() {
                let mut row = vec![e.to_string(), t.to_string()];
                row.extend(obs.iter().map(|v| v.to_string()));
                match ep.actions.get(t) {
                    Some(a) => row.extend(a.iter().map(|v| v.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), h.action_dim)),
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut first = String::new();
        reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
        let header = parse_header_line(&first).ok_or_else(|| Error::format(path, "missing or malformed '#' header line"))?;
        let mut r = csv::Reader::from_reader(reader);
        let mut episodes: Vec<Episode> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
            let e: usize = rec[0].parse().map_err(|_| Error::format(path, "bad episode index"))?;
            if e == episodes.len() {
                episodes.push(Episode {
                    observations: Vec::new(),
                    actions: Vec::new(),
                });
            } else if e + 1 != episodes.len() {
                return Err(Error::format(path, "episodes out of order"));
            }
            let ep = episodes.last_mut().expect("pushed above");
            let obs = (0..header.obs_dim).map(|i| num(&rec[2 + i])).collect::<Result<Vec<_>>>()?;
            ep.observations.push(obs);
            let base = 2 + header.obs_dim;
            if !rec[base].is_empty() {
                let a = (0..header.action_dim).map(|i| num(&rec[base + i])).collect::<Result<Vec<_>>>()?;
                ep.actions.push(a);
            }
        }
        let ds = Dataset { header, episodes };
        ds.validate()?;
        Ok(ds)
    }

    /// Per-dimension mean and standard deviation (floored at 1e-6) of all observations.
    pub fn observation_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.header.obs_dim;
        let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0usize);
        for x in self.episodes.iter().flat_map(|e| &e.observations) {
            for i in 0..d {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        (mean, std)
    }

    /// All sub-sequences of `len` observations (and `len − 1` actions), stepping by `stride`.
    pub fn windows(&self, len: usize, stride: usize) -> Vec<Episode> {
        let mut out = Vec::new();
        for ep in &self.episodes {
            let mut start = 0;
            while start + len <= ep.observations.len() {
                out.push(Episode {
                    observations: ep.observations[start..start + len].to_vec(),
                    actions: ep.actions[start..start + len - 1].to_vec(),
                });
                start += stride.max(1);
            }
        }
        out
    }
}

fn parse_header_line(line: &str) -> Option<DatasetHeader> {
    let body = line.trim().strip_prefix('#')?;
    let mut env = None;
    let mut nums = std::collections::HashMap::new();
    for kv in body.split_whitespace() {
        let (k, v) = kv.split_once('=')?;
        if k == "env" {
            env = Some(match v {
                "pendulum" => EnvKind::Pendulum,
                "ball" => EnvKind::Ball,
                "linear_gaussian" => EnvKind::LinearGaussian,
                _ => return None,
            });
        } else {
            nums.insert(k.to_string(), v.parse::<u64>().ok()?);
        }
    }
    Some(DatasetHeader {
        env: env?,
        obs_dim: *nums.get("obs_dim")? as usize,
        action_dim: *nums.get("action_dim")? as usize,
        horizon: *nums.get("horizon")? as usize,
        episodes: *nums.get("episodes")? as usize,
        seed: *nums.get("seed")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BallConfig, EnvConfig, PendulumConfig};

    fn ball() -> Env {
        EnvConfig::Ball(BallConfig::default()).build().unwrap()
    }

    #[test]
    fn single_step_episode() {
        let ds = generate_dataset(&ball(), 1, 1, 3).unwrap();
        assert_eq!(ds.episodes.len(), 1);
        assert_eq!(ds.episodes[0].observations.len(), 2);
        assert_eq!(ds.episodes[0].actions.len(), 1);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        assert!(matches!(generate_dataset(&ball(), 1, 0, 3), Err(Error::Validation(_))));
    }

    #[test]
    fn files_round_trip_and_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let env = EnvConfig::Pendulum(PendulumConfig::default()).build().unwrap();
        let ds = generate_dataset(&env, 3, 7, 11).unwrap();
        let csv1 = dir.path().join("a.csv");
        let csv2 = dir.path().join("b.csv");
        let bin = dir.path().join("a.bin");
        ds.save_csv(&csv1).unwrap();
        generate_dataset(&env, 3, 7, 11).unwrap().save_csv(&csv2).unwrap();
        assert_eq!(std::fs::read(&csv1).unwrap(), std::fs::read(&csv2).unwrap());
        ds.save_binary(&bin).unwrap();
        assert_eq!(Dataset::load_binary(&bin).unwrap(), ds);
        assert_eq!(Dataset::load_csv(&csv1).unwrap(), ds);
    }

    #[test]
    fn pendulum_observations_are_wrapped() {
        let env = EnvConfig::Pendulum(PendulumConfig::default()).build().unwrap();
        let ds = generate_dataset(&env, 4, 200, 1).unwrap();
        for ep in &ds.episodes {
            for o in &ep.observations {
                assert!(o[0] >= -std::f64::consts::PI && o[0] < std::f64::consts::PI);
                assert!(o[1].abs() <= 8.0);
            }
        }
    }

    #[test]
    fn uniform_policy_piles_mass_at_the_walls() {
        // fraction of positions in the outer 10% shell of the box versus the
        // shell's share of the area (19%)
        let ds = generate_dataset(&ball(), 20, 500, 5).unwrap();
        let (mut shell, mut total) = (0usize, 0usize);
        for ep in &ds.episodes {
            for o in &ep.observations {
                total += 1;
                if o.iter().any(|p| p.abs() > 4.5) {
                    shell += 1;
                }
            }
        }
        let frac = shell as f64 / total as f64;
        assert!(frac > 0.19 * 1.2, "{frac}");
    }

    #[test]
    fn windows_cover_each_episode() {
        let ds = generate_dataset(&ball(), 2, 9, 1).unwrap();
        let w = ds.windows(5, 5);
        assert_eq!(w.len(), 4);
        assert_eq!(w[0].actions.len(), 4);
        assert_eq!(w[1].observations[0], ds.episodes[0].observations[5]);
    }
}
