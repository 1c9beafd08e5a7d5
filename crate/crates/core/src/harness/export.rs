//! Partition-map export: what every QuadVSS block chose for one image.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::error::{invalid, Result};
use crate::harness::data::Pgm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub block: usize,
    pub selected: usize,
    /// Row-major 2×2 quadrant scores.
    pub quadrant_scores: [f64; 4],
    pub height: usize,
    pub width: usize,
    pub score_map_file: String,
    #[serde(skip)]
    pub score_map: Option<Pgm>,
}

/// Runs `image` in eval mode and collects one record per QuadVSS block.
/// Score maps are cropped to the block's unpadded feature grid.
pub fn export_partition_map<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<Vec<PartitionRecord>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(invalid(format!("expected [H, W, 3] image, got {s:?}")));
    }
    let grids = model.arch.block_grids(s[0], s[1])?;
    let (_, decisions) = model.classify_with_decisions(image)?;
    decisions
        .into_iter()
        .map(|d| {
            let (h, w) = grids[d.block];
            let (_, wp) = d.grid;
            let cropped: Vec<f64> = (0..h).flat_map(|y| d.score_map[y * wp..y * wp + w].to_vec()).collect();
            Ok(PartitionRecord {
                block: d.block,
                selected: d.selected.ok_or_else(|| invalid("eval pass produced no selection"))?,
                quadrant_scores: d.quadrant_scores,
                height: h,
                width: w,
                score_map_file: format!("block_{:02}.pgm", d.block),
                score_map: Some(Pgm::from_unit(w, h, &cropped)?),
            })
        })
        .collect()
}

/// Writes `partition.json` and one PGM per record into `dir`.
pub fn write_partition_export(records: &[PartitionRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in records {
        if let Some(pgm) = &r.score_map {
            pgm.write(fs::File::create(dir.join(&r.score_map_file))?)?;
        }
    }
    fs::write(dir.join("partition.json"), serde_json::to_vec_pretty(records)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_variant, VariantConfig};
    use crate::harness::data::synthetic_sample;

    #[test]
    fn export_is_deterministic_and_sized_like_features() {
        let m = build_variant::<f32>(&VariantConfig::micro(), 2).unwrap();
        let img = synthetic_sample(1, 0).image;
        let a = export_partition_map(&m, &img).unwrap();
        let b = export_partition_map(&m, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].height, a[0].width), (8, 8));
        assert_eq!((a[1].height, a[1].width), (4, 4));
        for r in &a {
            assert!(r.selected < 4);
            let pgm = r.score_map.as_ref().unwrap();
            assert_eq!((pgm.width, pgm.height), (r.width, r.height));
        }
    }
}
