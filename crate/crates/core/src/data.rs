//! Deterministic synthetic datasets.
//!
//! Each class is a (shape, color, background-texture) recipe; per-sample
//! position/scale jitter, color jitter, and pixel noise come from counter
//! RNG streams keyed by the sample index, so generation is order-independent
//! and parallelizable. Rasterization is pure integer arithmetic: sample
//! points live on an 8× subpixel grid, coverage is counted over a 4×4
//! supersample per pixel, and colors are quantized through `u8` before the
//! float image is materialized. No platform math touches the control flow.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ImageBatch;
use crate::container::{self, Section};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mask value for pixels outside the shape.
pub const BACKGROUND: u8 = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub image_side: usize,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            classes: 8,
            per_class_train: 200,
            per_class_test: 50,
            image_side: 32,
            seed: 0,
        }
    }
}

/// An in-memory dataset with disjoint, exhaustive train/val/test splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub params: DatasetParams,
    /// `[N, side²·3]` pixel values in [0,1] (quantized through u8).
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    /// Per-pixel class ids (`[N · side²]`); BACKGROUND off-shape.
    pub masks: Vec<u8>,
    pub train_idx: Vec<u32>,
    pub val_idx: Vec<u32>,
    pub test_idx: Vec<u32>,
    /// Content hash over params and payload.
    pub dataset_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

/// RGB palette, one entry per class recipe.
const PALETTE: [[i64; 3]; 8] = [
    [205, 49, 49],
    [46, 181, 66],
    [59, 86, 219],
    [222, 201, 48],
    [201, 55, 198],
    [47, 199, 196],
    [230, 139, 36],
    [133, 47, 219],
];

/// Background texture base tones (dark, light).
const TEXTURE_TONES: [i64; 2] = [54, 92];

fn recipe(class: usize) -> (Shape, [i64; 3], usize) {
    (
        SHAPES[class % SHAPES.len()],
        PALETTE[class % PALETTE.len()],
        class % 3,
    )
}

/// Inside-test on the 8× subpixel grid; all parameters in subpixel units.
fn inside(shape: Shape, x: i64, y: i64, cx: i64, cy: i64, h: i64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= h * h,
        Shape::Square => dx.abs() <= h && dy.abs() <= h,
        Shape::Diamond => dx.abs() + dy.abs() <= h,
        Shape::Triangle => {
            // Up-pointing isoceles triangle: A=(cx,cy−h), B=(cx−h,cy+h),
            // C=(cx+h,cy+h); inside iff on the inner side of all three edges.
            let (ax, ay) = (cx, cy - h);
            let (bx, by) = (cx - h, cy + h);
            let (tx, ty) = (cx + h, cy + h);
            let cross = |ox: i64, oy: i64, px: i64, py: i64| -> i64 {
                (px - ox) * (y - oy) - (py - oy) * (x - ox)
            };
            let c1 = cross(ax, ay, bx, by);
            let c2 = cross(bx, by, tx, ty);
            let c3 = cross(tx, ty, ax, ay);
            (c1 >= 0 && c2 >= 0 && c3 >= 0) || (c1 <= 0 && c2 <= 0 && c3 <= 0)
        }
    }
}

fn texture_tone(texture: usize, px: i64, py: i64, phase: i64, period: i64) -> i64 {
    let sel = match texture {
        0 => (py + phase).div_euclid(period),
        1 => (px + phase).div_euclid(period) + py.div_euclid(period),
        _ => (px + py + phase).div_euclid(period),
    };
    TEXTURE_TONES[(sel.rem_euclid(2)) as usize]
}

/// Generate one sample (image RGB u8 + mask) for `class`.
fn render_sample(params: &DatasetParams, class: usize, sample_index: usize) -> (Vec<u8>, Vec<u8>) {
    let side = params.image_side as i64;
    let (shape, color, texture) = recipe(class);
    let mut rng = StreamRng::new(params.seed, "data").fork(&format!("sample-{sample_index}"));

    // Geometry in 8× subpixel units, jittered per sample.
    let sub = 8i64;
    let h_min = side * sub / 6;
    let h_max = side * sub / 4;
    let h = h_min + (rng.next_u64() % (h_max - h_min + 1) as u64) as i64;
    let margin = h + sub;
    let c_lo = margin;
    let c_hi = side * sub - margin;
    let cx = c_lo + (rng.next_u64() % (c_hi - c_lo + 1) as u64) as i64;
    let cy = c_lo + (rng.next_u64() % (c_hi - c_lo + 1) as u64) as i64;

    // Appearance jitter: brightness factor in [179, 281]/256, texture phase,
    // stripe period, and a per-pixel noise stream.
    let bright = 179 + (rng.next_u64() % 103) as i64;
    let phase = (rng.next_u64() % 64) as i64;
    let period = 3 + (rng.next_u64() % 3) as i64;
    let mut noise = rng.fork("noise");

    let n_px = (side * side) as usize;
    let mut image = vec![0u8; n_px * 3];
    let mut mask = vec![BACKGROUND; n_px];
    for py in 0..side {
        for px in 0..side {
            // 4×4 supersample at subpixel centers (odd coordinates).
            let mut cov = 0i64;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = px * sub + sx * 2 + 1;
                    let y = py * sub + sy * 2 + 1;
                    if inside(shape, x, y, cx, cy, h) {
                        cov += 1;
                    }
                }
            }
            let tone = texture_tone(texture, px, py, phase, period);
            let idx = (py * side + px) as usize;
            for ch in 0..3 {
                let fg = color[ch] * bright / 256;
                let v = (tone * (16 - cov) + fg * cov) / 16;
                let n = (noise.next_u64() % 25) as i64 - 12;
                image[idx * 3 + ch] = (v + n).clamp(0, 255) as u8;
            }
            if cov >= 8 {
                mask[idx] = class as u8;
            }
        }
    }
    (image, mask)
}

fn content_hash(params: &DatasetParams, images: &[u8], labels: &[u32], masks: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(params).expect("params json"));
    h.update(images);
    for l in labels {
        h.update(l.to_le_bytes());
    }
    h.update(masks);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic class-balanced shape dataset. The validation split takes
/// one tenth of each class's training samples (at least one).
pub fn gen_shapes(params: &DatasetParams) -> Result<Dataset> {
    if params.classes < 2 {
        return Err(Error::Config("classes must be ≥ 2".into()));
    }
    if params.classes > PALETTE.len() {
        return Err(Error::Config(format!(
            "at most {} class recipes available",
            PALETTE.len()
        )));
    }
    if params.image_side < 12 {
        return Err(Error::Config(format!(
            "image side {} too small for shapes",
            params.image_side
        )));
    }
    if params.per_class_train < 2 || params.per_class_test < 1 {
        return Err(Error::Config("per-class counts too small".into()));
    }
    let per_class = params.per_class_train + params.per_class_test;
    let n = params.classes * per_class;
    let px = params.image_side * params.image_side;

    let mut images_u8 = vec![0u8; n * px * 3];
    let mut labels = vec![0u32; n];
    let mut masks = vec![0u8; n * px];
    let (mut train_idx, mut val_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());

    let val_per_class = (params.per_class_train / 10).max(1);
    let mut i = 0usize;
    for class in 0..params.classes {
        for s in 0..per_class {
            let (img, mask) = render_sample(params, class, i);
            images_u8[i * px * 3..(i + 1) * px * 3].copy_from_slice(&img);
            masks[i * px..(i + 1) * px].copy_from_slice(&mask);
            labels[i] = class as u32;
            if s < params.per_class_train {
                if s < params.per_class_train - val_per_class {
                    train_idx.push(i as u32);
                } else {
                    val_idx.push(i as u32);
                }
            } else {
                test_idx.push(i as u32);
            }
            i += 1;
        }
    }

    let dataset_id = content_hash(params, &images_u8, &labels, &masks);
    let images = Tensor::new(
        vec![n, px * 3],
        images_u8.iter().map(|&v| v as f32 / 255.0).collect(),
    )?;
    Ok(Dataset {
        params: params.clone(),
        images,
        labels,
        masks,
        train_idx,
        val_idx,
        test_idx,
        dataset_id,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.params.image_side
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Images of the given samples as a batch at scalar precision `T`.
    pub fn image_batch<T: Scalar>(&self, indices: &[u32]) -> ImageBatch<T> {
        let cols = self.images.cols();
        let data = self.images.data();
        let mut out = Tensor::zeros(vec![indices.len(), cols]);
        for (row, &i) in indices.iter().enumerate() {
            let src = &data[i as usize * cols..(i as usize + 1) * cols];
            for (o, &v) in out.data_mut()[row * cols..(row + 1) * cols]
                .iter_mut()
                .zip(src)
            {
                *o = T::of_f64(v as f64);
            }
        }
        ImageBatch::new(out, self.side()).expect("image batch shape")
    }

    pub fn labels_of(&self, indices: &[u32]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i as usize] as usize).collect()
    }

    /// Per-pixel mask of one sample.
    pub fn mask_of(&self, index: u32) -> &[u8] {
        let px = self.side() * self.side();
        &self.masks[index as usize * px..(index as usize + 1) * px]
    }
}

/// Relabel with a coarser class grouping. `grouping[g]` lists the original
/// classes merged into new label `g`; the grouping must partition the class
/// set. Masks keep the original shape classes.
pub fn relabel_coarse(ds: &Dataset, grouping: &[Vec<usize>]) -> Result<Dataset> {
    let c = ds.num_classes();
    let mut seen = vec![false; c];
    let mut map = vec![0u32; c];
    for (new_label, group) in grouping.iter().enumerate() {
        for &old in group {
            if old >= c || seen[old] {
                return Err(Error::Config(format!(
                    "grouping is not a partition of 0..{c} (class {old})"
                )));
            }
            seen[old] = true;
            map[old] = new_label as u32;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Config("grouping misses some classes".into()));
    }
    let labels: Vec<u32> = ds.labels.iter().map(|&l| map[l as usize]).collect();
    let mut out = ds.clone();
    let images_u8: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    out.labels = labels;
    out.dataset_id = content_hash(&ds.params, &images_u8, &out.labels, &ds.masks);
    Ok(out)
}

// ── container round trip ─────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    params: DatasetParams,
    dataset_id: String,
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(DatasetMeta {
        params: ds.params.clone(),
        dataset_id: ds.dataset_id.clone(),
    })?;
    let px = ds.side() * ds.side();
    let sections = vec![
        Section::from_tensor("images", &ds.images),
        Section::from_u32s("labels", &ds.labels),
        Section::from_u8s("masks", &ds.masks, vec![ds.len(), px]),
        Section::from_u32s("train_idx", &ds.train_idx),
        Section::from_u32s("val_idx", &ds.val_idx),
        Section::from_u32s("test_idx", &ds.test_idx),
    ];
    container::save(path, "dataset", meta, &sections)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, sections) = container::load(path)?;
    if header.kind != "dataset" {
        return Err(Error::Container(format!(
            "expected a dataset, found kind '{}'",
            header.kind
        )));
    }
    let meta: DatasetMeta = serde_json::from_value(header.spec)?;
    let images: Tensor<f32> = container::section(&sections, "images")?.to_tensor()?;
    let labels = container::section(&sections, "labels")?.to_u32s()?;
    let masks = container::section(&sections, "masks")?.bytes.clone();
    let ds = Dataset {
        params: meta.params,
        images,
        labels,
        masks,
        train_idx: container::section(&sections, "train_idx")?.to_u32s()?,
        val_idx: container::section(&sections, "val_idx")?.to_u32s()?,
        test_idx: container::section(&sections, "test_idx")?.to_u32s()?,
        dataset_id: meta.dataset_id.clone(),
    };
    // The header id is provenance; recompute to catch stale metadata.
    let images_u8: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    let recomputed = content_hash(&ds.params, &images_u8, &ds.labels, &ds.masks);
    if recomputed != meta.dataset_id {
        return Err(Error::Container(
            "dataset_id does not match recomputed content hash".into(),
        ));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> DatasetParams {
        DatasetParams {
            classes: 4,
            per_class_train: 10,
            per_class_test: 3,
            image_side: 16,
            seed: 7,
        }
    }

    #[test]
    fn same_params_same_id_different_seed_differs() {
        let a = gen_shapes(&small_params()).unwrap();
        let b = gen_shapes(&small_params()).unwrap();
        let mut p2 = small_params();
        p2.seed = 8;
        let c = gen_shapes(&p2).unwrap();
        assert_eq!(a.dataset_id, b.dataset_id);
        assert_ne!(a.dataset_id, c.dataset_id);
    }

    #[test]
    fn class_balance_exact() {
        let ds = gen_shapes(&small_params()).unwrap();
        let mut counts = vec![0usize; 4];
        for &l in &ds.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 13));
    }

    #[test]
    fn splits_disjoint_and_exhaustive() {
        let ds = gen_shapes(&small_params()).unwrap();
        let mut all: Vec<u32> = ds
            .train_idx
            .iter()
            .chain(&ds.val_idx)
            .chain(&ds.test_idx)
            .copied()
            .collect();
        all.sort_unstable();
        let expect: Vec<u32> = (0..ds.len() as u32).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn masks_agree_with_labels() {
        let ds = gen_shapes(&small_params()).unwrap();
        for i in 0..ds.len() as u32 {
            let label = ds.labels[i as usize] as u8;
            let mask = ds.mask_of(i);
            let fg: Vec<&u8> = mask.iter().filter(|&&m| m != BACKGROUND).collect();
            assert!(!fg.is_empty(), "sample {i} rendered no shape");
            assert!(fg.iter().all(|&&m| m == label));
        }
    }

    #[test]
    fn foreground_fraction_reasonable() {
        let ds = gen_shapes(&small_params()).unwrap();
        let px = ds.side() * ds.side();
        for i in 0..ds.len() as u32 {
            let fg = ds.mask_of(i).iter().filter(|&&m| m != BACKGROUND).count();
            let frac = fg as f64 / px as f64;
            assert!(frac > 0.02 && frac < 0.6, "sample {i}: {frac}");
        }
    }

    #[test]
    fn relabel_identity_and_pairwise() {
        let ds = gen_shapes(&small_params()).unwrap();
        let ident: Vec<Vec<usize>> = (0..4).map(|c| vec![c]).collect();
        let same = relabel_coarse(&ds, &ident).unwrap();
        assert_eq!(same.labels, ds.labels);

        let coarse = relabel_coarse(&ds, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert!(coarse.labels.iter().all(|&l| l < 2));
        for (new, old) in coarse.labels.iter().zip(&ds.labels) {
            assert_eq!(*new, old / 2);
        }
        assert_eq!(coarse.masks, ds.masks);
    }

    #[test]
    fn relabel_composition_matches_composed_partition() {
        let ds = gen_shapes(&small_params()).unwrap();
        let step1 = relabel_coarse(&ds, &[vec![0, 1], vec![2], vec![3]]).unwrap();
        let step2 = relabel_coarse(&step1, &[vec![0], vec![1, 2]]).unwrap();
        // composed: {0,1} -> 0, {2,3} -> 1
        let direct = relabel_coarse(&ds, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(step2.labels, direct.labels);
    }

    #[test]
    fn relabel_rejects_non_partition() {
        let ds = gen_shapes(&small_params()).unwrap();
        assert!(relabel_coarse(&ds, &[vec![0, 0], vec![1, 2, 3]]).is_err());
        assert!(relabel_coarse(&ds, &[vec![0], vec![1, 2]]).is_err());
    }

    #[test]
    fn export_import_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join(format!("stchlab-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ds = gen_shapes(&small_params()).unwrap();
        let p1 = dir.join("d1.stch1");
        let p2 = dir.join("d2.stch1");
        save_dataset(&ds, &p1).unwrap();
        let back = load_dataset(&p1).unwrap();
        assert_eq!(back.dataset_id, ds.dataset_id);
        assert_eq!(back.images, ds.images);
        save_dataset(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn import_rejects_foreign_version() {
        let dir = std::env::temp_dir().join(format!("stchlab-dsv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ds = gen_shapes(&small_params()).unwrap();
        let p = dir.join("d.stch1");
        save_dataset(&ds, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let hl = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[13..13 + hl].to_vec()).unwrap();
        let bumped = json.replace("\"format_version\":1", "\"format_version\":7");
        bytes[13..13 + hl].copy_from_slice(bumped.as_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn invalid_params_are_config_errors() {
        let mut p = small_params();
        p.classes = 1;
        assert!(gen_shapes(&p).is_err());
        let mut p = small_params();
        p.image_side = 8;
        assert!(gen_shapes(&p).is_err());
    }
}
