use std::fmt::Write as _;

use serde::Serialize;

use super::model::{forward_graph, Diagnostics, PairFeatures, PhaseTimes};
use super::{ModelConfig, ModelParams};
use crate::autodiff::{Backend, Eager};
use crate::error::Result;
use crate::featio::{generate_pair, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BenchMode {
    Dense,
    Sparse,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Dense => "dense",
            BenchMode::Sparse => "sparse",
        }
    }
}

/// One forward-pass measurement. Times are the per-phase minimum over the
/// repeats, in seconds.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub mode: BenchMode,
    pub n_a: usize,
    pub n_b: usize,
    pub phases: PhaseTimes,
    pub peak_bytes: usize,
    pub macs: u64,
}

/// Times untrained forward passes over a grid of set sizes. Both images of
/// a pair hold `n` detections before the warp discards out-of-frame points.
pub fn benchmark(cfg: &ModelConfig, ns: &[usize], modes: &[BenchMode], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        let synth = SynthConfig {
            n_points: n,
            channels: cfg.channels,
            rng_seed: seed,
            ..SynthConfig::default()
        };
        let (a, b, _) = generate_pair(&synth)?;
        let pair = PairFeatures::new(&a, &b)?;
        for &mode in modes {
            let model_cfg = ModelConfig {
                sparse: mode == BenchMode::Sparse,
                seed,
                ..cfg.clone()
            };
            let params = ModelParams::new(&model_cfg)?;
            let mut best: Option<PhaseTimes> = None;
            let (mut peak, mut macs) = (0, 0);
            for _ in 0..repeats.max(1) {
                let mut e = Eager::new();
                let mut diag = Diagnostics::default();
                let out = forward_graph(&mut e, &params, &pair, None, &mut diag)?;
                drop(out);
                peak = e.peak_bytes();
                macs = e.macs();
                let t = diag.phases;
                best = Some(match best {
                    None => t,
                    Some(b) => PhaseTimes {
                        encode: b.encode.min(t.encode),
                        bypass: b.bypass.min(t.bypass),
                        attention: b.attention.min(t.attention),
                        head: b.head.min(t.head),
                    },
                });
            }
            rows.push(BenchRow {
                n,
                mode,
                n_a: a.len(),
                n_b: b.len(),
                phases: best.expect("at least one repeat"),
                peak_bytes: peak,
                macs,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,mode,n_a,n_b,encode_s,bypass_s,attention_s,head_s,total_s,peak_bytes,macs\n");
    for r in rows {
        let p = &r.phases;
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.n,
            r.mode.name(),
            r.n_a,
            r.n_b,
            p.encode,
            p.bypass,
            p.attention,
            p.head,
            p.total(),
            r.peak_bytes,
            r.macs
        )
        .expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_size_and_mode() {
        let cfg = ModelConfig::micro();
        let rows = benchmark(&cfg, &[8, 16], &[BenchMode::Dense, BenchMode::Sparse], 1, 3).unwrap();
        assert_eq!(rows.len(), 4);
        let csv = bench_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("8,dense,"));
        assert!(lines[4].starts_with("16,sparse,"));
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 11);
        }
        assert!(rows.iter().all(|r| r.peak_bytes > 0 && r.macs > 0));
    }
}
