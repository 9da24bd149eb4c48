use std::collections::HashMap;
use std::path::Path;

use super::{Clip, ClipAudio, DatasetSplit};
use crate::error::{Error, Result};

pub const GTZAN_GENRES: [&str; 10] = [
    "blues",
    "classical",
    "country",
    "disco",
    "hiphop",
    "jazz",
    "metal",
    "pop",
    "reggae",
    "rock",
];

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            // published lists name the original `.au` files or omit the extension
            let stem = l.strip_suffix(".wav").or_else(|| l.strip_suffix(".au")).unwrap_or(l);
            format!("{stem}.wav")
        })
        .collect();
    if lines.is_empty() {
        return Err(Error::format(path.display().to_string(), "split file lists no clips"));
    }
    Ok(lines)
}

/// Builds a split from `root/<genre>/<genre>.<index>.wav` and three split
/// lists (train, val, test) holding one relative clip path per line.
/// Audio is not read here; clips stay file-backed until used.
pub fn load_gtzan(root: impl AsRef<Path>, split_files: [&Path; 3]) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let mut seen: HashMap<String, &'static str> = HashMap::new();
    let mut missing = Vec::new();
    let mut out = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        class_names: GTZAN_GENRES.iter().map(|g| g.to_string()).collect(),
    };
    for (name, file) in ["train", "val", "test"].into_iter().zip(split_files) {
        let mut clips = Vec::new();
        for id in read_list(file)? {
            let genre = id.split('/').next().unwrap_or_default();
            let Some(label) = GTZAN_GENRES.iter().position(|g| *g == genre) else {
                return Err(Error::format(
                    format!("{}: {id}", file.display()),
                    format!("unknown genre directory `{genre}`"),
                ));
            };
            if let Some(prev) = seen.insert(id.clone(), name) {
                return Err(Error::format(
                    format!("{}: {id}", file.display()),
                    format!("clip listed in both `{prev}` and `{name}` splits"),
                ));
            }
            let path = root.join(&id);
            if !path.is_file() {
                missing.push(path.display().to_string());
            }
            clips.push(Clip {
                id,
                label,
                audio: ClipAudio::File(path),
            });
        }
        match name {
            "train" => out.train = clips,
            "val" => out.val = clips,
            _ => out.test = clips,
        }
    }
    if !missing.is_empty() {
        return Err(Error::format(
            "gtzan.root",
            format!("{} listed clips are missing: {}", missing.len(), missing.join(", ")),
        ));
    }
    Ok(out)
}
