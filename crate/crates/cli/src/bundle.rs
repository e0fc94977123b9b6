//! Checkpoint bundle: the frozen state of both branches after `adapt`.
//!
//! Layout of the directory:
//!
//! ```text
//! manifest.json                 class/dim counts, center counts
//! config.json                   the resolved run settings
//! text_adapter.rclp             adapter containers
//! visual_adapter.rclp
//! text_basis.rclp               basis containers (64-bit)
//! visual_basis.rclp
//! visual_centers.rclp           embeddings container (32-bit values)
//! report.json, report.csv       evaluation report
//! predictions.rclp              ensemble labels of the adapted images
//! heldout_predictions.rclp      inductive runs only
//! ```

use std::fs;
use std::path::Path;

use realign_core::adapt::ClassCenters;
use realign_core::container::{load_adapter, load_basis, load_embeddings, save_container, Container};
use realign_core::selftrain::{Branch, BranchState, RunConfig};
use realign_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: usize,
    pub dims: usize,
    pub center_counts: Vec<usize>,
}

pub fn save(dir: &Path, cfg: &RunConfig, text: &BranchState, visual: &BranchState) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let centers = visual
        .centers
        .as_ref()
        .ok_or_else(|| CliError::Usage("visual branch finished without class centers".into()))?;
    let manifest =
        Manifest { classes: centers.centers.rows(), dims: text.adapter.dims(), center_counts: centers.counts.clone() };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("config.json"), cfg)?;
    save_container(&Container::Adapter(text.adapter.clone()), dir.join("text_adapter.rclp"))?;
    save_container(&Container::Adapter(visual.adapter.clone()), dir.join("visual_adapter.rclp"))?;
    save_container(&Container::Basis(text.basis.clone()), dir.join("text_basis.rclp"))?;
    save_container(&Container::Basis(visual.basis.clone()), dir.join("visual_basis.rclp"))?;
    save_container(&Container::Embeddings(centers.centers.clone()), dir.join("visual_centers.rclp"))?;
    Ok(())
}

/// Frozen branch states ready for inference.
pub fn load(dir: &Path) -> CliResult<(RunConfig, BranchState, BranchState)> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let cfg: RunConfig = read_json(&dir.join("config.json"))?;
    let mut text = BranchState::new(Branch::Text, manifest.dims, &cfg);
    let mut visual = BranchState::new(Branch::Visual, manifest.dims, &cfg);
    text.adapter = load_adapter(dir.join("text_adapter.rclp"))?;
    visual.adapter = load_adapter(dir.join("visual_adapter.rclp"))?;
    text.basis = load_basis(dir.join("text_basis.rclp"))?;
    visual.basis = load_basis(dir.join("visual_basis.rclp"))?;
    let centers = load_embeddings(dir.join("visual_centers.rclp"))?;
    if centers.rows() != manifest.classes || manifest.center_counts.len() != manifest.classes {
        return Err(Error::Format("bundle centers disagree with the manifest".into()).into());
    }
    for part in [text.adapter.dims(), visual.adapter.dims(), text.basis.source_dims(), visual.basis.source_dims()] {
        if part != manifest.dims {
            return Err(Error::DimensionMismatch { expected: manifest.dims, actual: part }.into());
        }
    }
    visual.centers = Some(ClassCenters { centers, counts: manifest.center_counts });
    Ok((cfg, text, visual))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("bundle metadata serializes");
    fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}
