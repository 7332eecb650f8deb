//! Encoder registry: name -> construction recipe. Built-in entries cover
//! the three upgrade types of the stitching table; a registry file can add
//! or override entries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diffup_core::encoders::{pretrain_tiny_cnn, Encoder, EncoderFamily, PretrainRecipe};
use diffup_core::synthshapes::{split_classes, ClassDef};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_encoder, save_encoder};
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderRecipe {
    pub family: EncoderFamily,
    pub seed: u64,
    pub dims: [usize; 3],
    /// Weight file, relative to the registry's directory.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Pretraining recipe for tiny CNNs whose weight file is missing.
    #[serde(default)]
    pub pretrain: Option<PretrainRecipe>,
    /// Fold whose base classes the tiny CNN is pretrained on.
    #[serde(default)]
    pub fold: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub encoders: BTreeMap<String, EncoderRecipe>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Encoder names for the three upgrade types, starting from `rp-32`.
pub const UPGRADES: [(&str, &str, &str); 3] = [
    ("dims scale-up", "rp-32", "rp-64"),
    ("architecture shift", "rp-32", "cnn-a"),
    ("pretraining change", "cnn-a", "cnn-b"),
];

impl Registry {
    pub fn builtin() -> Self {
        let rp = |dims| EncoderRecipe {
            family: EncoderFamily::RandomProjection,
            seed: 1,
            dims,
            weights: None,
            pretrain: None,
            fold: 0,
        };
        let cnn = |file: &str, recipe: PretrainRecipe| EncoderRecipe {
            family: EncoderFamily::TinyCnn,
            seed: recipe.seed,
            dims: [32, 64, 128],
            weights: Some(PathBuf::from("encoders").join(file)),
            pretrain: Some(recipe),
            fold: 0,
        };
        let mut encoders = BTreeMap::new();
        encoders.insert("rp-32".into(), rp([32, 64, 128]));
        encoders.insert("rp-48".into(), rp([48, 96, 192]));
        encoders.insert("rp-64".into(), rp([64, 128, 256]));
        encoders.insert("cnn-a".into(), cnn("cnn-a.ckpt", PretrainRecipe::recipe_a()));
        encoders.insert("cnn-b".into(), cnn("cnn-b.ckpt", PretrainRecipe::recipe_b()));
        Self { encoders, base_dir: PathBuf::from(".") }
    }

    /// Built-ins overlaid with the entries of `path`, if it exists.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reg = Self::builtin();
        reg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if path.is_file() {
            let text = std::fs::read_to_string(path).at(path)?;
            let file: Registry = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            reg.encoders.extend(file.encoders);
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).at(path)
    }

    pub fn names(&self) -> Vec<String> {
        self.encoders.keys().cloned().collect()
    }

    pub fn recipe(&self, name: &str) -> Result<&EncoderRecipe> {
        self.encoders
            .get(name)
            .ok_or_else(|| Error::UnknownEncoder { name: name.into(), registered: self.names() })
    }

    pub fn weights_path(&self, name: &str) -> Result<Option<PathBuf>> {
        Ok(self.recipe(name)?.weights.as_ref().map(|w| self.base_dir.join(w)))
    }

    /// Builds the encoder. Tiny CNNs load their weight file, or are
    /// pretrained and cached there when it does not exist yet.
    pub fn build(&self, name: &str, input_size: usize, classes: &[ClassDef]) -> Result<Encoder> {
        let r = self.recipe(name)?;
        match r.family {
            EncoderFamily::RandomProjection => Ok(Encoder::random_projection(name, r.seed, r.dims, input_size)),
            EncoderFamily::TinyCnn => {
                let path = self
                    .weights_path(name)?
                    .ok_or_else(|| Error::Config(format!("tiny CNN encoder {name} has no weight file")))?;
                if path.is_file() {
                    let (enc, meta) = load_encoder(&path, name)?;
                    if meta.id.dims != r.dims {
                        return Err(Error::Config(format!("{} holds dims {:?}, registry says {:?}", path.display(), meta.id.dims, r.dims)));
                    }
                    return Ok(enc);
                }
                let recipe = r
                    .pretrain
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{} is missing and {name} has no pretraining recipe", path.display())))?;
                let enc = self.pretrain(name, r, recipe, input_size, classes, &path)?;
                Ok(enc)
            }
        }
    }

    fn pretrain(
        &self,
        name: &str,
        r: &EncoderRecipe,
        recipe: &PretrainRecipe,
        input_size: usize,
        classes: &[ClassDef],
        path: &Path,
    ) -> Result<Encoder> {
        let (base, _) = split_classes(r.fold)?;
        let base_defs: Vec<ClassDef> = base.iter().map(|c| classes[*c].clone()).collect();
        let (enc, report) = pretrain_tiny_cnn(name, &base_defs, r.dims, input_size, recipe)?;
        let provenance = serde_json::json!({ "recipe": recipe, "report": report, "fold": r.fold });
        save_encoder(path, &enc, base_defs.len(), provenance)?;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_lists_registered() {
        let err = Registry::builtin().recipe("vit-huge").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vit-huge") && msg.contains("rp-32") && msg.contains("cnn-b"), "{msg}");
    }

    #[test]
    fn file_entries_extend_builtins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoders.toml");
        std::fs::write(&path, "[encoders.rp-7]\nfamily = \"random_projection\"\nseed = 7\ndims = [8, 8, 8]\n").unwrap();
        let reg = Registry::load(&path).unwrap();
        assert_eq!(reg.recipe("rp-7").unwrap().dims, [8, 8, 8]);
        assert!(reg.recipe("rp-32").is_ok());
        let enc = reg.build("rp-7", 64, &[]).unwrap();
        assert_eq!(enc.dims(), [8, 8, 8]);
    }
}
