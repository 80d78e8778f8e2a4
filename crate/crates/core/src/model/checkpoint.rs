//! Canonical-field checkpoints: a JSON manifest plus a little-endian f32 blob
//! holding each primitive's fields in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gaussian::{BranchTag, CanonicalField, GaussianPrimitive};
use super::sh::coeff_count;
use crate::error::{Error, Result};
use crate::image::{read_f32_le, write_f32_le};

pub const FIELD_ORDER: [&str; 5] = ["mean", "scale_raw", "rotation", "opacity_raw", "sh"];
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct CanonicalManifest {
    pub format_version: u32,
    pub sh_degree: usize,
    pub branch_tag: BranchTag,
    pub count: usize,
    pub fields: Vec<String>,
    pub blob: String,
}

impl CanonicalField {
    /// Writes `<stem>.json` and `<stem>.bin` inside `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = format!("{stem}.bin");
        let manifest = CanonicalManifest {
            format_version: FORMAT_VERSION,
            sh_degree: self.sh_degree,
            branch_tag: self.branch,
            count: self.len(),
            fields: FIELD_ORDER.iter().map(|s| s.to_string()).collect(),
            blob: blob.clone(),
        };
        let mut flat = Vec::with_capacity(self.len() * GaussianPrimitive::flat_len(self.sh_degree));
        for p in &self.primitives {
            p.write_flat(&mut flat);
        }
        write_f32_le(&dir.join(&blob), flat)?;
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CanonicalManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::data(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.fields != FIELD_ORDER {
            return Err(Error::data(&path, format!("unexpected field order {:?}", manifest.fields)));
        }
        let blob_path = dir.join(&manifest.blob);
        let flat = read_f32_le(&blob_path)?;
        let stride = GaussianPrimitive::flat_len(manifest.sh_degree);
        if flat.len() != manifest.count * stride {
            return Err(Error::data(
                &blob_path,
                format!("expected {} floats, found {}", manifest.count * stride, flat.len()),
            ));
        }
        let mut field = CanonicalField::new(manifest.sh_degree, manifest.branch_tag)?;
        debug_assert_eq!(stride, 11 + coeff_count(manifest.sh_degree));
        field.primitives = flat.chunks_exact(stride).map(GaussianPrimitive::read_flat).collect();
        Ok(field)
    }
}
