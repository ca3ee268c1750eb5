//! On-disk dataset: SVTF tensors plus a JSON manifest
//! `{seed, count, canvas_size, schema}`.

use super::{attribute_schema, attrs_matrix, generate_batch, DatasetConfig};
use crate::error::{Error, Result};
use crate::svtf;
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub images: Array4<f32>,
    pub attrs: Array2<u8>,
    pub labels: Vec<usize>,
    pub schema: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    count: usize,
    canvas_size: usize,
    schema: Vec<String>,
    config: DatasetConfig,
}

impl Dataset {
    pub fn generate(seed: u64, count: usize, config: &DatasetConfig) -> Result<Dataset> {
        let (batch, attrs, labels) = generate_batch(seed, count, config)?;
        Ok(Dataset {
            config: config.clone(),
            seed,
            images: batch.data,
            attrs: attrs_matrix(&attrs),
            labels,
            schema: attribute_schema(config)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images `from..to` as an owned `(B,3,H,W)` block.
    pub fn image_slice(&self, from: usize, to: usize) -> Array4<f32> {
        self.images
            .slice(ndarray::s![from..to, .., .., ..])
            .to_owned()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        // pixels are already quantized to the u8 grid, so u8 storage is exact
        let quantized = self.images.mapv(|v| (v * 255.0).round() as u8);
        svtf::write(dir.join("images.svtf"), &svtf::Tensor::U8(quantized.into_dyn()))?;
        svtf::write(
            dir.join("attributes.svtf"),
            &svtf::Tensor::U8(self.attrs.clone().into_dyn()),
        )?;
        let labels = ndarray::Array1::from_vec(self.labels.iter().map(|&l| l as u8).collect());
        svtf::write(dir.join("labels.svtf"), &svtf::Tensor::U8(labels.into_dyn()))?;
        let manifest = DatasetManifest {
            seed: self.seed,
            count: self.len(),
            canvas_size: self.config.canvas_size,
            schema: self.schema.clone(),
            config: self.config.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let images = svtf::read(dir.join("images.svtf"))?;
        let images = images
            .as_u8()?
            .mapv(|v| v as f32 / 255.0)
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Data(format!("images tensor not 4-d: {e}")))?;
        let attrs = svtf::read(dir.join("attributes.svtf"))?
            .as_u8()?
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Data(format!("attributes tensor not 2-d: {e}")))?;
        let labels = svtf::read(dir.join("labels.svtf"))?
            .as_u8()?
            .iter()
            .map(|&v| v as usize)
            .collect();
        Ok(Dataset {
            config: manifest.config,
            seed: manifest.seed,
            images,
            attrs,
            labels,
            schema: manifest.schema,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(5, 8, &DatasetConfig::default()).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.images, back.images);
        assert_eq!(ds.attrs, back.attrs);
        assert_eq!(ds.labels, back.labels);
        assert_eq!(ds.schema, back.schema);
    }
}
