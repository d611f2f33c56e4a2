use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::GroundingSample;
use crate::error::{Error, Result};
use crate::scenegen::Scene;

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const SPLITS_FILE: &str = "splits.json";

/// Scene ids of each partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Compact JSON with sorted keys and every float printed with six decimals.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Validation(e.to_string()))?;
    let mut out = String::new();
    write_value(&v, &mut out);
    Ok(out)
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Number(n) if n.is_f64() => out.push_str(&format!("{:.6}", n.as_f64().unwrap())),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(&map[k], out);
            }
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&canonical_json(item)?);
        buf.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(buf.as_bytes())?;
    Ok(())
}

/// Parses one JSON line, reporting failures as `<what>[k].<field>: <reason>`.
pub fn parse_record<T: DeserializeOwned>(line: &str, what: &str, k: usize) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let inner = e.inner().to_string();
        // Missing fields are reported at the parent; name the field itself.
        if let Some(field) = inner.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
            path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
        }
        let path = if path == "." { String::new() } else { format!(".{path}") };
        Error::Load(format!("{what}[{k}]{path}: {inner}"))
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    text.lines().filter(|l| !l.trim().is_empty()).enumerate().map(|(k, l)| parse_record(l, what, k)).collect()
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes: Vec<Scene> = read_jsonl(path, "scenes")?;
    for (k, s) in scenes.iter().enumerate() {
        for (i, o) in s.objects.iter().enumerate() {
            if o.id != i {
                return Err(Error::Load(format!("scenes[{k}].objects[{i}].id: expected {i}, found {}", o.id)));
            }
            if o.size.iter().any(|&x| x <= 0.0) {
                return Err(Error::Load(format!("scenes[{k}].objects[{i}].size: extents must be positive")));
            }
        }
    }
    Ok(scenes)
}

pub fn read_samples(path: &Path) -> Result<Vec<GroundingSample>> {
    let samples: Vec<GroundingSample> = read_jsonl(path, "samples")?;
    for (k, s) in samples.iter().enumerate() {
        s.validate().map_err(|e| Error::Load(format!("samples[{k}] ({}): {}", s.sample_id, strip_kind(&e))))?;
    }
    Ok(samples)
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Validation(m) | Error::Load(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Scenes, samples and the scene-level split, as stored in a data directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub samples: Vec<GroundingSample>,
    pub split: Split,
    scene_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(scenes: Vec<Scene>, samples: Vec<GroundingSample>, split: Split) -> Result<Self> {
        let scene_index: HashMap<String, usize> =
            scenes.iter().enumerate().map(|(i, s)| (s.scene_id.clone(), i)).collect();
        if scene_index.len() != scenes.len() {
            return Err(Error::Load("duplicate scene ids".into()));
        }
        for (k, s) in samples.iter().enumerate() {
            let scene = scene_index
                .get(&s.scene_id)
                .map(|&i| &scenes[i])
                .ok_or_else(|| Error::Load(format!("samples[{k}].scene_id: unknown scene {}", s.scene_id)))?;
            s.validate_against(scene).map_err(|e| Error::Load(format!("samples[{k}]: {}", strip_kind(&e))))?;
        }
        for id in split.train.iter().chain(&split.val) {
            if !scene_index.contains_key(id) {
                return Err(Error::Load(format!("splits: unknown scene {id}")));
            }
        }
        Ok(Dataset { scenes, samples, split, scene_index })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let scenes = read_scenes(&dir.join(SCENES_FILE))?;
        let samples = read_samples(&dir.join(SAMPLES_FILE))?;
        let split_path = dir.join(SPLITS_FILE);
        let text =
            fs::read_to_string(&split_path).map_err(|e| Error::Load(format!("{}: {e}", split_path.display())))?;
        let split = parse_record(&text, "splits", 0)?;
        Dataset::new(scenes, samples, split)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(SCENES_FILE), &self.scenes)?;
        write_jsonl(&dir.join(SAMPLES_FILE), &self.samples)?;
        fs::write(dir.join(SPLITS_FILE), canonical_json(&self.split)? + "\n")?;
        Ok(())
    }

    pub fn scene(&self, scene_id: &str) -> Option<&Scene> {
        self.scene_index.get(scene_id).map(|&i| &self.scenes[i])
    }

    fn in_split<'a>(&'a self, ids: &'a [String]) -> Vec<&'a GroundingSample> {
        self.samples.iter().filter(|s| ids.contains(&s.scene_id)).collect()
    }

    pub fn train_samples(&self) -> Vec<&GroundingSample> {
        self.in_split(&self.split.train)
    }

    pub fn val_samples(&self) -> Vec<&GroundingSample> {
        self.in_split(&self.split.val)
    }

    /// Class names occurring in any scene, sorted.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.label.clone())).collect();
        names.sort();
        names.dedup();
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_fixed_and_keys_sorted() {
        let v = serde_json::json!({"b": 1.5, "a": [2, 0.1], "c": {"z": true, "y": "q"}});
        assert_eq!(canonical_json(&v).unwrap(), r#"{"a":[2,0.100000],"b":1.500000,"c":{"y":"q","z":true}}"#);
    }

    #[test]
    fn missing_target_id_named() {
        let line = r#"{"sample_id":"x","scene_id":"s","tokens":["a"],"phrases":[],"tags":{"hard":false,"view_dep":false}}"#;
        let err = parse_record::<GroundingSample>(line, "samples", 4).unwrap_err();
        assert!(err.to_string().contains("samples[4].target_id"), "{err}");
    }

    #[test]
    fn nested_type_error_path() {
        let line = r#"{"sample_id":"x","scene_id":"s","tokens":["a"],"target_id":0,"phrases":[{"start":"0","end":1,"object_id":0,"is_target":true}],"tags":{"hard":false,"view_dep":false}}"#;
        let err = parse_record::<GroundingSample>(line, "samples", 0).unwrap_err();
        assert!(err.to_string().contains("samples[0].phrases[0].start"), "{err}");
    }
}
