use super::{conditioning, Encoder, Observation, Policy};
use crate::checkpoint::Checkpoint;
use crate::dataset::{features, Dataset, NormStats};
use crate::error::{bail, Result};

pub(super) const CHECKPOINT_KIND: &str = "vinn";

/// Nonparametric policy: kernel-weighted average over the `k` nearest
/// stored embeddings.
#[derive(Debug, Clone)]
pub struct VinnPolicy {
    pub embeddings: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub k: usize,
    pub stats: NormStats,
    pub encoder: Encoder,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest memories with unnormalized weights `exp(-d²)`.
///
/// Neighbours are ordered by squared distance, then insertion order. If
/// every weight underflows, distances are shifted by the smallest first.
fn neighbours(memory: &[Vec<f64>], k: usize, query: &[f64]) -> Result<(Vec<(usize, f64)>, f64)> {
    if memory.is_empty() {
        bail!(Config, "VINN memory is empty");
    }
    if k == 0 || k > memory.len() {
        bail!(Config, "k = {k} must be in 1..={}", memory.len());
    }
    if let Some(m) = memory.iter().find(|m| m.len() != query.len()) {
        bail!(Shape, "query has {} dims, memory {}", query.len(), m.len());
    }
    let mut scored: Vec<(f64, usize)> = memory
        .iter()
        .enumerate()
        .map(|(i, m)| (squared_distance(m, query), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    let mut w: Vec<(usize, f64)> = scored.iter().map(|&(d2, i)| (i, (-d2).exp())).collect();
    let mut sum: f64 = w.iter().map(|p| p.1).sum();
    if sum == 0.0 {
        let base = scored[0].0;
        w = scored.iter().map(|&(d2, i)| (i, (-(d2 - base)).exp())).collect();
        sum = w.iter().map(|p| p.1).sum();
    }
    Ok((w, sum))
}

/// Indices of the `k` nearest memories with weights summing to one.
pub fn vinn_weights(memory: &[Vec<f64>], k: usize, query: &[f64]) -> Result<Vec<(usize, f64)>> {
    let (w, sum) = neighbours(memory, k, query)?;
    Ok(w.into_iter().map(|(i, wi)| (i, wi / sum)).collect())
}

/// `Σ wᵢ aᵢ` with `wᵢ = exp(-dᵢ²) / Σ exp(-dⱼ²)` over the `k` nearest
/// memories. Weights are normalized first so that `k = 1` returns the
/// stored action bit for bit.
pub fn vinn_predict(memory: &[Vec<f64>], actions: &[Vec<f64>], k: usize, query: &[f64]) -> Result<Vec<f64>> {
    if memory.len() != actions.len() {
        bail!(Shape, "{} embeddings but {} actions", memory.len(), actions.len());
    }
    let mut out = vec![0.0; actions[0].len()];
    for (i, wi) in vinn_weights(memory, k, query)? {
        for (o, a) in out.iter_mut().zip(&actions[i]) {
            *o += wi * a;
        }
    }
    Ok(out)
}

impl VinnPolicy {
    /// Stores the normalized features and raw action of every step.
    pub fn build(ds: &Dataset, stats: NormStats, encoder: Encoder, k: usize) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(ds.num_steps());
        let mut actions = Vec::with_capacity(ds.num_steps());
        for t in &ds.trajectories {
            for s in &t.steps {
                embeddings.push(stats.normalize_obs(&features(encoder.as_dyn(), &s.obs, &s.joint)?)?);
                actions.push(s.action.clone());
            }
        }
        if k == 0 || k > embeddings.len() {
            bail!(Config, "k = {k} must be in 1..={}", embeddings.len());
        }
        Ok(Self {
            embeddings,
            actions,
            k,
            stats,
            encoder,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("k", self.k);
        self.encoder.write(&mut ck);
        self.stats.write(&mut ck);
        let n = self.embeddings.len();
        ck.push_array("memory.embeddings", vec![n, self.stats.obs_dim()], self.embeddings.concat());
        ck.push_array("memory.actions", vec![n, self.action_dim()], self.actions.concat());
        ck
    }

    pub fn read_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let rows = |name: &str| -> Result<Vec<Vec<f64>>> {
            let a = ck.array(name)?;
            if a.shape.len() != 2 || a.shape[1] == 0 {
                bail!(Format, "memory array '{name}' has shape {:?}", a.shape);
            }
            Ok(a.data.chunks(a.shape[1]).map(<[f64]>::to_vec).collect())
        };
        let embeddings = rows("memory.embeddings")?;
        let actions = rows("memory.actions")?;
        let k: usize = ck.parse("k")?;
        if embeddings.len() != actions.len() || k == 0 || k > embeddings.len() {
            bail!(Format, "inconsistent VINN memory");
        }
        Ok(Self {
            embeddings,
            actions,
            k,
            stats: NormStats::read(ck)?,
            encoder: Encoder::read(ck)?,
        })
    }
}

impl Policy for VinnPolicy {
    fn exec_horizon(&self) -> usize {
        1
    }

    fn plan(&self, history: &[Observation], _seed: u64) -> Result<Vec<Vec<f64>>> {
        let q = conditioning(history, 1, &self.stats, self.encoder.as_dyn())?;
        Ok(vec![vinn_predict(&self.embeddings, &self.actions, self.k, &q)?])
    }
}
