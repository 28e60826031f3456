//! Visual spot checks: per-class PNG grids with real training images on the
//! top row and generated images on the bottom row.

use std::path::{Path, PathBuf};

use crate::dataset::save_image_tensor;
use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::fold::PreparedFold;

fn blit(grid: &mut Tensor, image: &Tensor, row: usize, col: usize) {
    let (h, w) = (image.h, image.w);
    for ch in 0..image.c {
        let src = image.plane(0, ch);
        let gw = grid.w;
        let dst = grid.plane_mut(0, ch);
        for y in 0..h {
            let dst_off = (row * h + y) * gw + col * w;
            dst[dst_off..dst_off + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
}

/// Writes one grid image per class that has synthetic samples and returns
/// the written paths. Each grid pairs up to `per_class` real images (top)
/// with the first generated images of that class (bottom).
pub fn write_class_grids(
    prepared: &PreparedFold,
    out_dir: &Path,
    per_class: usize,
) -> Result<Vec<PathBuf>> {
    if per_class == 0 {
        return Err(Error::validation("per_class must be >= 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for class in 1..prepared.train.num_classes {
        let real: Vec<&Tensor> = prepared
            .train
            .indices_of_class(class)
            .into_iter()
            .map(|i| &prepared.train.samples[i].image)
            .collect();
        let synthetic: Vec<&Tensor> = prepared
            .pool
            .iter()
            .filter(|s| s.label == class)
            .map(|s| &s.image)
            .collect();
        let cols = per_class.min(real.len()).min(synthetic.len());
        if cols == 0 {
            continue;
        }
        let (c, h, w) = (real[0].c, real[0].h, real[0].w);
        let mut grid = Tensor::zeros(1, c, 2 * h, cols * w);
        for (col, image) in real.iter().take(cols).enumerate() {
            blit(&mut grid, image, 0, col);
        }
        for (col, image) in synthetic.iter().take(cols).enumerate() {
            blit(&mut grid, image, 1, col);
        }
        let path = out_dir.join(format!("class{class}-grid.png"));
        save_image_tensor(&path, &grid)?;
        written.push(path);
    }
    Ok(written)
}
