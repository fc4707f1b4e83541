//! Clip directories: `<name>.rvid` videos with optional
//! `<name>.flow.rvid` ground-truth flow sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use stvsr_core::datagen::ClipWithTruth;
use stvsr_core::pipeline::ClipSource;
use stvsr_core::VideoTensor;

use crate::rvid::{load_flows, load_rvid, RvidError};

pub const FLOW_SUFFIX: &str = ".flow.rvid";

/// Clip ids (file stems) and paths in `dir`, sorted by id. Flow sidecars
/// are skipped.
pub fn inventory(dir: &Path) -> Result<Vec<(String, PathBuf)>, RvidError> {
    let io = |e| RvidError::Io { path: dir.display().to_string(), source: e };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if name.ends_with(FLOW_SUFFIX) {
            continue;
        }
        if let Some(id) = name.strip_suffix(".rvid") {
            out.push((id.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn sidecar_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{FLOW_SUFFIX}"))
}

/// Every clip of a directory, held in memory. `clip(i)` cycles through
/// them in id order.
#[derive(Clone, Debug)]
pub struct DirCorpus {
    pub ids: Vec<String>,
    pub clips: Vec<ClipWithTruth>,
}

impl DirCorpus {
    pub fn load(dir: &Path) -> Result<Self, RvidError> {
        let inv = inventory(dir)?;
        if inv.is_empty() {
            return Err(RvidError::Shape(format!("{} holds no .rvid clips", dir.display())));
        }
        let mut ids = Vec::with_capacity(inv.len());
        let mut clips = Vec::with_capacity(inv.len());
        for (id, path) in inv {
            let video: VideoTensor = load_rvid(&path)?;
            let side = sidecar_path(dir, &id);
            let (true_flow_fwd, true_flow_bwd) = if side.exists() { load_flows(&side)? } else { (Vec::new(), Vec::new()) };
            if !true_flow_fwd.is_empty() && true_flow_fwd.len() + 1 != video.frames_len() {
                return Err(RvidError::Shape(format!("{}: {} flows for {} frames", side.display(), true_flow_fwd.len(), video.frames_len())));
            }
            ids.push(id);
            clips.push(ClipWithTruth { video, true_flow_fwd, true_flow_bwd });
        }
        Ok(Self { ids, clips })
    }
}

impl ClipSource for DirCorpus {
    fn clip(&self, index: u64) -> stvsr_core::Result<ClipWithTruth> {
        Ok(self.clips[(index % self.clips.len() as u64) as usize].clone())
    }
}
