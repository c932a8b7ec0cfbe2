//! On-disk formats: factor-chain directories, TSVD results, PSF-Attn
//! checkpoints. Float arrays are raw little-endian f64 files next to JSON
//! manifests.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::chord::{PatternJson, PatternMode, SparsityPattern};
use crate::error::{Result, SfError};
use crate::matrix::{DenseMatrix, FactorChain, SparseSquareMatrix};
use crate::psf::{PsfAttnModel, PsfConfig, Task};
use crate::tsvd::{TsvdManifest, TsvdResult};

/// Serialize any value as pretty JSON at `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path, expect_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect_len * 8 {
        return Err(SfError::Parse(format!(
            "{} holds {} bytes, expected {} f64 values",
            path.display(),
            bytes.len(),
            expect_len
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Directory layout: `manifest.json` + `pattern.json` + `factor_XX.f64`,
/// factors stored left to right in product order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainManifest {
    pub m: usize,
    pub n: usize,
    pub mode: PatternMode,
    pub order: String,
}

pub fn save_chain(dir: &Path, chain: &FactorChain) -> Result<()> {
    fs::create_dir_all(dir)?;
    let pattern = chain.pattern();
    write_json(&dir.join("pattern.json"), &pattern.to_json())?;
    write_json(
        &dir.join("manifest.json"),
        &ChainManifest {
            m: chain.m(),
            n: chain.n(),
            mode: pattern.mode(),
            order: "left_to_right".into(),
        },
    )?;
    for (i, f) in chain.factors().iter().enumerate() {
        write_f64s(&dir.join(format!("factor_{i:02}.f64")), f.values())?;
    }
    Ok(())
}

pub fn load_chain(dir: &Path) -> Result<FactorChain> {
    let manifest: ChainManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.order != "left_to_right" {
        return Err(SfError::Parse(format!("unknown factor order {:?}", manifest.order)));
    }
    let pattern_json: PatternJson = read_json(&dir.join("pattern.json"))?;
    let pattern = Arc::new(SparsityPattern::from_json(&pattern_json)?);
    if pattern.n() != manifest.n || pattern.mode() != manifest.mode {
        return Err(SfError::Parse("manifest and pattern file disagree".into()));
    }
    let mut factors = Vec::with_capacity(manifest.m);
    for i in 0..manifest.m {
        let values = read_f64s(&dir.join(format!("factor_{i:02}.f64")), pattern.nnz())?;
        factors.push(SparseSquareMatrix::new(pattern.clone(), values)?);
    }
    FactorChain::new(factors)
}

/// Directory layout: `manifest.json` (n, r, singular values) + `u.f64`,
/// `v.f64` with the N x r column blocks row-major.
pub fn save_tsvd(dir: &Path, t: &TsvdResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("manifest.json"),
        &TsvdManifest { n: t.u.rows(), r: t.r, singular_values: t.singular_values.clone() },
    )?;
    write_f64s(&dir.join("u.f64"), t.u.data())?;
    write_f64s(&dir.join("v.f64"), t.v.data())?;
    Ok(())
}

pub fn load_tsvd(dir: &Path) -> Result<TsvdResult> {
    let manifest: TsvdManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.singular_values.len() != manifest.r {
        return Err(SfError::Parse("singular value count does not match rank".into()));
    }
    let u = read_f64s(&dir.join("u.f64"), manifest.n * manifest.r)?;
    let v = read_f64s(&dir.join("v.f64"), manifest.n * manifest.r)?;
    Ok(TsvdResult {
        u: DenseMatrix::from_vec(manifest.n, manifest.r, u)?,
        v: DenseMatrix::from_vec(manifest.n, manifest.r, v)?,
        singular_values: manifest.singular_values,
        r: manifest.r,
    })
}

/// Checkpoint layout: `manifest.json` (task + architecture), `pattern.json`,
/// and one `params.f64` blob in the model's `write_params` order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub task: Task,
    pub config: PsfConfig,
    pub param_count: usize,
}

pub fn save_model(dir: &Path, model: &PsfAttnModel, config: &PsfConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(model.param_count());
    model.write_params(&mut params);
    write_json(
        &dir.join("manifest.json"),
        &ModelManifest { task: model.task, config: config.clone(), param_count: params.len() },
    )?;
    write_json(&dir.join("pattern.json"), &model.pattern().to_json())?;
    write_f64s(&dir.join("params.f64"), &params)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(PsfAttnModel, PsfConfig)> {
    let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
    let pattern_json: PatternJson = read_json(&dir.join("pattern.json"))?;
    let pattern = SparsityPattern::from_json(&pattern_json)?;
    if pattern.n() != manifest.config.n || pattern.mode() != manifest.config.mode {
        return Err(SfError::Parse("manifest and pattern file disagree".into()));
    }
    let mut model = PsfAttnModel::new(manifest.task, &manifest.config)?;
    if model.param_count() != manifest.param_count {
        return Err(SfError::Parse(format!(
            "architecture implies {} parameters, manifest claims {}",
            model.param_count(),
            manifest.param_count
        )));
    }
    let params = read_f64s(&dir.join("params.f64"), manifest.param_count)?;
    model.read_params(&params);
    Ok((model, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chord::build_pattern;
    use crate::data::gen_temporal_order;
    use crate::matrix::chain_materialize;
    use crate::psf::SeqInput;
    use crate::solver::init_chain;
    use crate::tsvd::tsvd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = Arc::new(build_pattern(16, PatternMode::FullCoverage).unwrap());
        let chain = init_chain(&p, 4, 11).unwrap();
        save_chain(dir.path(), &chain).unwrap();
        let back = load_chain(dir.path()).unwrap();
        assert_eq!(back.m(), chain.m());
        for (a, b) in back.factors().iter().zip(chain.factors()) {
            assert_eq!(a.values(), b.values());
        }
        assert_eq!(chain_materialize(&back).data(), chain_materialize(&chain).data());
    }

    #[test]
    fn chain_load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = Arc::new(build_pattern(8, PatternMode::FullCoverage).unwrap());
        let chain = init_chain(&p, 2, 3).unwrap();
        save_chain(dir.path(), &chain).unwrap();
        // truncate one factor blob
        let victim = dir.path().join("factor_01.f64");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_chain(dir.path()).is_err());
        assert!(load_chain(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn tsvd_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DenseMatrix::from_vec(12, 12, (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let t = tsvd(&x, 5).unwrap();
        save_tsvd(dir.path(), &t).unwrap();
        let back = load_tsvd(dir.path()).unwrap();
        assert_eq!(back.r, t.r);
        assert_eq!(back.singular_values, t.singular_values);
        assert_eq!(back.u.data(), t.u.data());
        assert_eq!(back.v.data(), t.v.data());
    }

    #[test]
    fn model_roundtrip_preserves_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PsfConfig {
            n: 8,
            d: 4,
            d_v: 4,
            hidden: 6,
            m_factors: Some(3),
            mode: PatternMode::FullCoverage,
            residual: false,
            seed: 7,
        };
        let model = PsfAttnModel::new(Task::TemporalOrder, &cfg).unwrap();
        save_model(dir.path(), &model, &cfg).unwrap();
        let (back, back_cfg) = load_model(dir.path()).unwrap();
        assert_eq!(back_cfg.n, cfg.n);
        let inst = gen_temporal_order(8, 1, 13).unwrap().pop().unwrap();
        let a = model.forward(SeqInput::Tokens(&inst.tokens)).unwrap();
        let b = back.forward(SeqInput::Tokens(&inst.tokens)).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.e_new.data(), b.e_new.data());
    }

    #[test]
    fn model_load_rejects_param_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PsfConfig {
            n: 8,
            d: 4,
            d_v: 4,
            hidden: 6,
            m_factors: Some(2),
            mode: PatternMode::FullCoverage,
            residual: false,
            seed: 1,
        };
        let model = PsfAttnModel::new(Task::Adding, &cfg).unwrap();
        save_model(dir.path(), &model, &cfg).unwrap();
        let blob = dir.path().join("params.f64");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_model(dir.path()).is_err());
    }
}
