//! Nearest-neighbour estimate of each model's unbatched utility for a query,
//! and the batch-aware proxy utility built on top of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Query;
use crate::scaling::ScalingFn;

pub const DEFAULT_K_NEIGHBORS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na.sqrt() * nb.sqrt())
                }
            }
        }
    }
}

/// Multi-label k-nearest-neighbour classifier over query embeddings. Each
/// label row holds one 0/1 correctness bit per model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    dim: usize,
    models: usize,
    k_neighbors: usize,
    metric: Metric,
    embeddings: Vec<Vec<f64>>,
    labels: Vec<Vec<u8>>,
}

impl Router {
    pub fn train(training: &[Query], k_neighbors: usize, metric: Metric) -> Result<Self> {
        let first = training
            .first()
            .ok_or_else(|| Error::invalid("router needs at least one training query"))?;
        if k_neighbors == 0 || k_neighbors > training.len() {
            return Err(Error::invalid(format!(
                "k_neighbors {k_neighbors} outside [1, {}]",
                training.len()
            )));
        }
        let dim = first.embedding.len();
        let models = first
            .truth_utilities
            .as_ref()
            .map(Vec::len)
            .ok_or_else(|| Error::MissingLabels(format!("query {} has no truth utilities", first.id)))?;
        let mut embeddings = Vec::with_capacity(training.len());
        let mut labels = Vec::with_capacity(training.len());
        for q in training {
            let truth = q
                .truth_utilities
                .as_ref()
                .ok_or_else(|| Error::MissingLabels(format!("query {} has no truth utilities", q.id)))?;
            if truth.len() != models {
                return Err(Error::invalid(format!(
                    "query {}: {} labels, expected {models}",
                    q.id,
                    truth.len()
                )));
            }
            if q.embedding.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: q.embedding.len() });
            }
            embeddings.push(q.embedding.clone());
            labels.push(truth.clone());
        }
        Ok(Router { dim, models, k_neighbors, metric, embeddings, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn models(&self) -> usize {
        self.models
    }

    pub fn k_neighbors(&self) -> usize {
        self.k_neighbors
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Mean label vector of the `k` nearest training points; distance ties
    /// go to the lower training index.
    pub fn estimate(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: embedding.len() });
        }
        let mut dists: Vec<(f64, usize)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (self.metric.distance(embedding, e), i))
            .collect();
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = self.k_neighbors;
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, by_dist);
            dists.truncate(k);
        }
        let mut out = vec![0.0; self.models];
        for &(_, i) in &dists {
            for (o, &l) in out.iter_mut().zip(&self.labels[i]) {
                *o += f64::from(l);
            }
        }
        out.iter_mut().for_each(|o| *o /= k as f64);
        Ok(out)
    }
}

pub fn train_router(training: &[Query], k_neighbors: usize, metric: Metric) -> Result<Router> {
    Router::train(training, k_neighbors, metric)
}

/// Estimated per-model utility of `query` at batch size 1.
pub fn estimate_unbatched_utility(router: &Router, query: &Query) -> Result<Vec<f64>> {
    router.estimate(&query.embedding)
}

/// `u1 * rho(b)`.
pub fn proxy_utility(u1: f64, scaling: &ScalingFn, b: u32) -> f64 {
    (u1 * scaling.evaluate(b)).clamp(0.0, 1.0)
}
