//! Checkpoint formats.
//!
//! A block is one JSON document: config fields plus CSV-embedded matrices.
//! The frozen base is not embedded; it is referenced by file path (relative
//! to the JSON file) and stored once as a matrix CSV. An omni adapter is a
//! JSON manifest referencing its three block files plus the shared base CSV.
//! All round trips are value-exact: CSV carries 17 significant digits and
//! JSON floats round-trip through shortest-representation printing.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::block::{Expert, SmolaBlock, SmolaConfig};
use crate::error::{Result, SmolaError};
use crate::numkit::{matrix_from_csv, matrix_to_csv, Matrix};
use crate::omni::OmniAdapter;

pub const BLOCK_KIND: &str = "smola_block";
pub const OMNI_KIND: &str = "omni_adapter";

#[derive(Debug, Serialize, Deserialize)]
struct ExpertCsv {
    w_in_csv: String,
    w_out_csv: String,
}

/// On-disk form of one block.
#[derive(Debug, Serialize, Deserialize)]
pub struct BlockFile {
    pub kind: String,
    pub config: SmolaConfig,
    pub alpha: f64,
    phi_csv: String,
    experts: Vec<ExpertCsv>,
    /// Path of the base CSV, relative to this JSON file.
    pub base_path: String,
}

/// On-disk form of an omni adapter: three block files plus the shared base.
#[derive(Debug, Serialize, Deserialize)]
pub struct OmniManifest {
    pub kind: String,
    pub block_v: String,
    pub block_t: String,
    pub block_mm: String,
    pub base_path: String,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> SmolaError {
    SmolaError::Corrupt {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Writes the base CSV referenced by block/omni files.
pub fn save_base(base: &Matrix, path: &Path) -> Result<()> {
    std::fs::write(path, matrix_to_csv(base))?;
    Ok(())
}

pub fn load_base(path: &Path) -> Result<Arc<Matrix>> {
    let text = std::fs::read_to_string(path)?;
    let m = matrix_from_csv(&text).map_err(|e| corrupt(path, e.to_string()))?;
    Ok(Arc::new(m))
}

/// Serializes a block to a JSON value with the given base reference.
pub fn block_to_file(block: &SmolaBlock, base_rel: &str) -> BlockFile {
    BlockFile {
        kind: BLOCK_KIND.to_string(),
        config: block.config.clone(),
        alpha: block.alpha,
        phi_csv: matrix_to_csv(&block.phi),
        experts: block
            .experts
            .iter()
            .map(|e| ExpertCsv {
                w_in_csv: matrix_to_csv(&e.w_in),
                w_out_csv: matrix_to_csv(&e.w_out),
            })
            .collect(),
        base_path: base_rel.to_string(),
    }
}

/// Reconstructs a block from its file form and an already-loaded base.
pub fn block_from_file(file: &BlockFile, base: Arc<Matrix>, origin: &Path) -> Result<SmolaBlock> {
    if file.kind != BLOCK_KIND {
        return Err(corrupt(origin, format!("expected kind {BLOCK_KIND:?}, found {:?}", file.kind)));
    }
    file.config.validate().map_err(|e| corrupt(origin, e.to_string()))?;
    let cfg = &file.config;
    if base.shape() != (cfg.d_in, cfg.d_out) {
        return Err(corrupt(
            origin,
            format!(
                "base is {}x{} but config wants {}x{}",
                base.rows(),
                base.cols(),
                cfg.d_in,
                cfg.d_out
            ),
        ));
    }
    if !file.alpha.is_finite() {
        return Err(corrupt(origin, "alpha is not finite"));
    }
    let phi = matrix_from_csv(&file.phi_csv).map_err(|e| corrupt(origin, e.to_string()))?;
    if phi.shape() != (cfg.num_experts, cfg.d_in) {
        return Err(corrupt(origin, "phi shape disagrees with config"));
    }
    if file.experts.len() != cfg.num_experts {
        return Err(corrupt(origin, "expert count disagrees with config"));
    }
    let mut experts = Vec::with_capacity(file.experts.len());
    for (i, e) in file.experts.iter().enumerate() {
        let w_in = matrix_from_csv(&e.w_in_csv).map_err(|e| corrupt(origin, e.to_string()))?;
        let w_out = matrix_from_csv(&e.w_out_csv).map_err(|e| corrupt(origin, e.to_string()))?;
        if w_in.shape() != (cfg.rank, cfg.d_in) || w_out.shape() != (cfg.d_out, cfg.rank) {
            return Err(corrupt(origin, format!("expert {i} shape disagrees with config")));
        }
        experts.push(Expert { w_in, w_out });
    }
    Ok(SmolaBlock {
        config: file.config.clone(),
        phi,
        alpha: file.alpha,
        experts,
        base,
    })
}

/// Saves `block` as `<dir>/<name>.json` plus `<dir>/<name>_base.csv`.
/// Returns the JSON path.
pub fn save_block(block: &SmolaBlock, dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let base_rel = format!("{name}_base.csv");
    save_base(&block.base, &dir.join(&base_rel))?;
    let file = block_to_file(block, &base_rel);
    let json_path = dir.join(format!("{name}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&file).map_err(io_err)?)?;
    Ok(json_path)
}

/// Loads a block saved by [`save_block`].
pub fn load_block(json_path: &Path) -> Result<SmolaBlock> {
    let text = std::fs::read_to_string(json_path)?;
    let file: BlockFile =
        serde_json::from_str(&text).map_err(|e| corrupt(json_path, e.to_string()))?;
    let base = load_base(&parent_of(json_path).join(&file.base_path))?;
    block_from_file(&file, base, json_path)
}

/// Saves an adapter as `<dir>/<name>.json` (manifest) referencing
/// `<name>_{v,t,mm}.json` and one shared `<name>_base.csv`.
pub fn save_omni(adapter: &OmniAdapter, dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let base_rel = format!("{name}_base.csv");
    save_base(&adapter.base, &dir.join(&base_rel))?;
    for (suffix, block) in [
        ("v", &adapter.block_v),
        ("t", &adapter.block_t),
        ("mm", &adapter.block_mm),
    ] {
        let file = block_to_file(block, &base_rel);
        let path = dir.join(format!("{name}_{suffix}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&file).map_err(io_err)?)?;
    }
    let manifest = OmniManifest {
        kind: OMNI_KIND.to_string(),
        block_v: format!("{name}_v.json"),
        block_t: format!("{name}_t.json"),
        block_mm: format!("{name}_mm.json"),
        base_path: base_rel,
    };
    let manifest_path = dir.join(format!("{name}.json"));
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(io_err)?,
    )?;
    Ok(manifest_path)
}

/// Loads an adapter saved by [`save_omni`]. The base CSV is read once and
/// shared by all three blocks.
pub fn load_omni(manifest_path: &Path) -> Result<OmniAdapter> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: OmniManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(manifest_path, e.to_string()))?;
    if manifest.kind != OMNI_KIND {
        return Err(corrupt(
            manifest_path,
            format!("expected kind {OMNI_KIND:?}, found {:?}", manifest.kind),
        ));
    }
    let dir = parent_of(manifest_path);
    let base = load_base(&dir.join(&manifest.base_path))?;
    let load = |rel: &str| -> Result<SmolaBlock> {
        let path = dir.join(rel);
        let text = std::fs::read_to_string(&path)?;
        let file: BlockFile =
            serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
        block_from_file(&file, base.clone(), &path)
    };
    let block_v = load(&manifest.block_v)?;
    let block_t = load(&manifest.block_t)?;
    let block_mm = load(&manifest.block_mm)?;
    OmniAdapter::new(block_v, block_t, block_mm)
}

/// Identifies which adapter kind a checkpoint JSON holds.
pub fn peek_kind(json_path: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Probe {
        kind: String,
    }
    let text = std::fs::read_to_string(json_path)?;
    let probe: Probe =
        serde_json::from_str(&text).map_err(|e| corrupt(json_path, e.to_string()))?;
    Ok(probe.kind)
}

fn io_err(e: serde_json::Error) -> SmolaError {
    SmolaError::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use crate::omni::OmniAdapter;

    fn sample_block(seed: u64) -> SmolaBlock {
        let mut rng = Rng::new(seed);
        let cfg = SmolaConfig {
            num_experts: 3,
            rank: 2,
            d_in: 5,
            d_out: 4,
            alpha_init: 1.0,
            init_scale: 1.0,
            seed,
        };
        let base = Arc::new(Matrix::from_fn(5, 4, |_, _| rng.next_gaussian()));
        let mut block = SmolaBlock::init(cfg, base).unwrap();
        block.alpha = 1.7312;
        for expert in &mut block.experts {
            let (r, c) = expert.w_out.shape();
            expert.w_out = Matrix::from_fn(r, c, |_, _| rng.next_gaussian() * 1e-7);
        }
        block
    }

    fn assert_blocks_bit_identical(a: &SmolaBlock, b: &SmolaBlock) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
        for (x, y) in a.phi.data().iter().zip(b.phi.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (ea, eb) in a.experts.iter().zip(b.experts.iter()) {
            for (x, y) in ea.w_in.data().iter().zip(eb.w_in.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in ea.w_out.data().iter().zip(eb.w_out.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (x, y) in a.base.data().iter().zip(b.base.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn block_round_trip_is_value_exact() {
        let dir = tempfile::tempdir().unwrap();
        let block = sample_block(5150);
        let path = save_block(&block, dir.path(), "blk").unwrap();
        let loaded = load_block(&path).unwrap();
        assert_blocks_bit_identical(&block, &loaded);
    }

    #[test]
    fn omni_round_trip_is_value_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(88);
        let base = Arc::new(Matrix::from_fn(4, 3, |_, _| rng.next_gaussian()));
        let cfg = |e: usize, s: u64| SmolaConfig {
            num_experts: e,
            rank: 1,
            d_in: 4,
            d_out: 3,
            alpha_init: 1.0,
            init_scale: 1.0,
            seed: s,
        };
        let adapter = OmniAdapter::new(
            SmolaBlock::init(cfg(2, 1), base.clone()).unwrap(),
            SmolaBlock::init(cfg(4, 2), base.clone()).unwrap(),
            SmolaBlock::init(cfg(3, 3), base.clone()).unwrap(),
        )
        .unwrap();
        let path = save_omni(&adapter, dir.path(), "omni").unwrap();
        let loaded = load_omni(&path).unwrap();
        assert_blocks_bit_identical(&adapter.block_v, &loaded.block_v);
        assert_blocks_bit_identical(&adapter.block_t, &loaded.block_t);
        assert_blocks_bit_identical(&adapter.block_mm, &loaded.block_mm);
        // The loaded blocks share one base allocation.
        assert!(Arc::ptr_eq(&loaded.block_v.base, &loaded.block_mm.base));
    }

    #[test]
    fn corrupt_json_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{ not json").unwrap();
        match load_block(&path) {
            Err(SmolaError::Corrupt { path: p, .. }) => assert!(p.contains("bad.json")),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_in_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let block = sample_block(9);
        let path = save_block(&block, dir.path(), "blk").unwrap();
        // Tamper: claim a different expert count.
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("\"num_experts\": 3", "\"num_experts\": 2");
        std::fs::write(&path, tampered).unwrap();
        assert!(load_block(&path).is_err());
    }

    #[test]
    fn missing_base_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let block = sample_block(10);
        let path = save_block(&block, dir.path(), "blk").unwrap();
        std::fs::remove_file(dir.path().join("blk_base.csv")).unwrap();
        assert!(load_block(&path).is_err());
    }

    #[test]
    fn peek_kind_distinguishes_formats() {
        let dir = tempfile::tempdir().unwrap();
        let block = sample_block(11);
        let bpath = save_block(&block, dir.path(), "blk").unwrap();
        assert_eq!(peek_kind(&bpath).unwrap(), BLOCK_KIND);
    }
}
