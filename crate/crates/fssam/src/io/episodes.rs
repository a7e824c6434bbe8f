//! Episode-set directories.
//!
//! One episode set is a directory with a `set.json` manifest and one
//! subdirectory per episode:
//!
//! ```text
//! <set>/
//!   set.json                 {"episode_count": N}
//!   ep_00000/
//!     meta.json              {"class_id": c, "shots": k}
//!     query.fssf             feature map
//!     query_mask.fssf        binary mask
//!     support_00.fssf
//!     support_00_mask.fssf
//!     ...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fssf::{read_feature_map, read_mask, write_feature_file, FssfValue};
use crate::pipeline::{Episode, SupportSample};

#[derive(Debug, Serialize, Deserialize)]
struct SetManifest {
    episode_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeMeta {
    class_id: u32,
    shots: usize,
}

fn episode_dir(root: &Path, index: usize) -> std::path::PathBuf {
    root.join(format!("ep_{index:05}"))
}

/// Write episodes under `root`, creating directories as needed.
pub fn save_episodes(root: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let manifest = SetManifest {
        episode_count: episodes.len(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(root.join("set.json"), text)?;

    for (index, episode) in episodes.iter().enumerate() {
        let dir = episode_dir(root, index);
        fs::create_dir_all(&dir)?;
        let meta = EpisodeMeta {
            class_id: episode.class_id(),
            shots: episode.shots(),
        };
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(dir.join("meta.json"), text)?;
        write_feature_file(
            dir.join("query.fssf"),
            &FssfValue::Features(episode.query_features().clone()),
        )?;
        write_feature_file(
            dir.join("query_mask.fssf"),
            &FssfValue::Mask(episode.query_mask().clone()),
        )?;
        for (s, support) in episode.supports().iter().enumerate() {
            write_feature_file(
                dir.join(format!("support_{s:02}.fssf")),
                &FssfValue::Features(support.features.clone()),
            )?;
            write_feature_file(
                dir.join(format!("support_{s:02}_mask.fssf")),
                &FssfValue::Mask(support.mask.clone()),
            )?;
        }
    }
    Ok(())
}

/// Load an episode set written by [`save_episodes`].
pub fn load_episodes(root: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let root = root.as_ref();
    let manifest_text = fs::read_to_string(root.join("set.json")).map_err(|e| {
        Error::InvalidConfig(format!("{}: cannot read set.json: {e}", root.display()))
    })?;
    let manifest: SetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::InvalidConfig(format!("{}/set.json: {e}", root.display())))?;

    let mut episodes = Vec::with_capacity(manifest.episode_count);
    for index in 0..manifest.episode_count {
        let dir = episode_dir(root, index);
        let meta_text = fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", dir.display())))?;
        let meta: EpisodeMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::InvalidConfig(format!("{}/meta.json: {e}", dir.display())))?;
        let query = read_feature_map(dir.join("query.fssf"))?;
        let query_mask = read_mask(dir.join("query_mask.fssf"))?;
        let mut supports = Vec::with_capacity(meta.shots);
        for s in 0..meta.shots {
            supports.push(SupportSample {
                features: read_feature_map(dir.join(format!("support_{s:02}.fssf")))?,
                mask: read_mask(dir.join(format!("support_{s:02}_mask.fssf")))?,
            });
        }
        episodes.push(
            Episode::new(query, query_mask, supports, meta.class_id)
                .map_err(|e| e.in_episode(index))?,
        );
    }
    Ok(episodes)
}
