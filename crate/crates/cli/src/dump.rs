//! JSON form of one block's attention maps. Per query it lists the keys with
//! the highest attention weight next to the keys with the highest modulated
//! bypass score, so the two sets can be compared directly.

use resmatch::pipeline::{AttentionCapture, StreamCapture};
use resmatch::tensor::lrelu_scalar;
use serde::{Deserialize, Serialize};

pub const SCHEMA_ID: &str = "resmatch/attention-dump/v1";
pub const DEFAULT_TOP: usize = 16;

/// Scores closer than this count as equal when deciding whether the bypass
/// ranks keys at all.
const FLAT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionDump {
    pub schema: String,
    pub layer: usize,
    pub head: usize,
    pub top: usize,
    pub sparse: bool,
    pub streams: Vec<StreamDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamDump {
    pub name: String,
    pub lambda: f64,
    pub beta: f64,
    pub bypass_active: bool,
    /// Every modulated bypass score is the same, so it prefers no key and
    /// the per-query bypass lists are left empty.
    pub bypass_uniform: bool,
    pub queries: Vec<QueryDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryDump {
    pub index: usize,
    pub attention: Vec<Ranked>,
    pub bypass: Vec<Ranked>,
    /// Keys this query may attend to on the sparse path.
    pub neighbors: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ranked {
    pub key: usize,
    pub value: f64,
}

/// Highest values first; equal values keep the lower key first.
fn top_k(items: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<Ranked> {
    let mut v: Vec<(usize, f64)> = items.collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v.into_iter().map(|(key, value)| Ranked { key, value }).collect()
}

fn stream_dump(s: &StreamCapture, head: usize, top: usize, slope: f64) -> StreamDump {
    let (lambda, beta) = (s.lambda[head], s.beta[head]);
    let modulated = s.raw_bypass.map(|v| lrelu_scalar(lambda * v + beta, slope));
    let data = modulated.data();
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let uniform = data.is_empty() || hi - lo <= FLAT_TOL;
    let weights = &s.weights[head];
    let queries = (0..weights.rows())
        .map(|i| {
            let keys: Vec<usize> = match &s.neighbors {
                Some(idx) => idx.row(i).to_vec(),
                None => (0..weights.cols()).collect(),
            };
            let attention = top_k(keys.iter().zip(weights.row(i)).map(|(&k, &w)| (k, w)), top);
            let bypass = if uniform {
                Vec::new()
            } else {
                top_k(modulated.row(i).iter().copied().enumerate(), top)
            };
            QueryDump {
                index: i,
                attention,
                bypass,
                neighbors: s.neighbors.as_ref().map(|_| keys),
            }
        })
        .collect();
    StreamDump {
        name: s.name.to_string(),
        lambda,
        beta,
        bypass_active: s.bypass_active,
        bypass_uniform: uniform,
        queries,
    }
}

pub fn build_dump(capture: &AttentionCapture, head: usize, top: usize, sparse: bool, slope: f64) -> AttentionDump {
    AttentionDump {
        schema: SCHEMA_ID.to_string(),
        layer: capture.layer,
        head,
        top,
        sparse,
        streams: capture
            .streams
            .iter()
            .map(|s| stream_dump(s, head, top, slope))
            .collect(),
    }
}
