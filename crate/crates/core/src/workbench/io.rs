//! JSONL/JSON files and backbone checkpoints.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig, BackboneWeights};
use crate::checkpoint::Container;
use crate::error::{Result, TflowError};
use crate::training::DatasetRecord;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one line; used for streaming training metrics.
pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(item)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Reads every non-empty line; parse errors name the file and line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)
        .map_err(|e| TflowError::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| TflowError::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

/// Dataset records with non-empty query, target and source.
pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let recs: Vec<DatasetRecord> = read_jsonl(path)?;
    for (i, r) in recs.iter().enumerate() {
        if r.query.is_empty() || r.target.is_empty() || r.source.is_empty() {
            return Err(TflowError::Dataset(format!(
                "{}: record {} needs non-empty query, target and source",
                path.display(),
                i + 1
            )));
        }
    }
    if recs.is_empty() {
        return Err(TflowError::Dataset(format!("{} holds no records", path.display())));
    }
    Ok(recs)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    let hash = backbone
        .frozen_hash()
        .ok_or_else(|| TflowError::State("only a frozen backbone can be saved".into()))?;
    let mut c = Container::new(serde_json::json!({
        "kind": "backbone",
        "config": backbone.config(),
        "weight_hash": hash,
    }));
    for (name, t) in backbone.weights().named() {
        c.insert(name, t)?;
    }
    c.save(path)
}

/// Loads and freezes a saved backbone, verifying the recorded weight hash.
pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let c = Container::load(path)?;
    let meta = |key: &str| {
        c.metadata.get(key).cloned().ok_or_else(|| TflowError::Format {
            tensor: crate::checkpoint::METADATA_KEY.into(),
            reason: format!("missing `{key}`"),
        })
    };
    let cfg: BackboneConfig = serde_json::from_value(meta("config")?)?;
    let want = meta("weight_hash")?;
    let weights = BackboneWeights::from_named(&cfg, |name| c.tensors.get(name).cloned())?;
    let backbone = Backbone::from_weights(cfg, weights)?;
    if Some(backbone.frozen_hash().unwrap_or_default()) != want.as_str() {
        return Err(TflowError::Format {
            tensor: crate::checkpoint::METADATA_KEY.into(),
            reason: "backbone weights do not match the recorded hash".into(),
        });
    }
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs = vec![DatasetRecord {
            query: "18#5=".into(),
            context: "op=add".into(),
            target: "23".into(),
            source: "arith".into(),
        }];
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
        std::fs::write(&p, "{\"query\":\"a\",\"target\":\"b\",\"source\":\"c\",\"extra\":1}\n").unwrap();
        let err = read_records(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        std::fs::write(&p, "{\"query\":\"a\",\"target\":\"\",\"source\":\"c\"}\n").unwrap();
        assert!(read_records(&p).is_err());
    }

    #[test]
    fn backbone_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.ckpt");
        let cfg = BackboneConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ffn: 32, ..Default::default() };
        let mut b = Backbone::build(cfg, 3).unwrap();
        let h = b.freeze().unwrap();
        save_backbone(&p, &b).unwrap();
        let back = load_backbone(&p).unwrap();
        assert_eq!(back.frozen_hash(), Some(h.as_str()));
        let bytes = std::fs::read(&p).unwrap();
        save_backbone(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }
}
