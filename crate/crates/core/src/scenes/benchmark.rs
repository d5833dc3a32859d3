use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_image, Schedule};
use crate::encoders::Vocabulary;
use crate::error::Result;
use crate::mmdit::Model;
use crate::rng::SeedStream;

use super::oracle::{oracle_eval, OracleConfig, OracleReport};
use super::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub seed: u64,
    pub spatial: f64,
    pub color: f64,
    pub shape: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "variant,seed,spatial,color,shape")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.6},{:.6},{:.6}", r.variant, r.seed, r.spatial, r.color, r.shape)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean rates of one variant over its seeds.
    pub fn mean(&self, variant: &str) -> Option<[f64; 3]> {
        let rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.variant == variant).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some([
            rows.iter().map(|r| r.spatial).sum::<f64>() / n,
            rows.iter().map(|r| r.color).sum::<f64>() / n,
            rows.iter().map(|r| r.shape).sum::<f64>() / n,
        ])
    }
}

/// Sample every eval scene once per seed and score it with the oracle.
pub fn benchmark(
    model: &Model,
    variant: &str,
    schedule: &Schedule,
    eval: &[Scene],
    steps: usize,
    seeds: &[u64],
    oracle: &OracleConfig,
) -> Result<BenchTable> {
    let vocab = Vocabulary::default();
    let mut table = BenchTable::default();
    for &seed in seeds {
        let mut report = OracleReport::default();
        for scene in eval {
            let layout = scene.spec.to_layout(&vocab, &model.config.text)?;
            let s = SeedStream::new(seed).substream("bench").index(scene.seed).seed();
            let out = sample_image(model, schedule, &layout, steps, 0.0, s)?;
            report.merge(&oracle_eval(&out.image, &scene.spec, oracle)?);
        }
        table.rows.push(BenchRow {
            variant: variant.to_owned(),
            seed,
            spatial: report.spatial(),
            color: report.color(),
            shape: report.shape(),
        });
    }
    Ok(table)
}
