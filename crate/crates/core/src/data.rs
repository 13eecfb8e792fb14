//! Dataset ingestion (YOLO-style labels), the synthetic detection corpus,
//! k-fold splitting, subset sampling and checkpoint persistence.
//!
//! Label files are one line per box: `class cx cy w h`, all normalized.
//! Checkpoints are a single little-endian binary file: magic, format
//! version, length-prefixed UTF-8 graph config, training metadata, then
//! `(name, dtype, shape, f32 payload)` records.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::detection::GtBox;
use crate::error::{Error, Result};
use crate::graph::{build_model, GraphConfig, Model};
use crate::rng::{streams, StreamRng};
use crate::tensor::{real, FeatureMap, Scalar};

/// One image with its ground-truth boxes. Images are `(1, 3, H, W)` RGB in
/// `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Sample<T: Scalar> {
    pub name: String,
    pub image: FeatureMap<T>,
    pub labels: Vec<GtBox>,
}

/// Class list: one name per line, order defines ids.
pub fn load_class_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Load an image directory plus YOLO-style label files.
///
/// Samples come back in lexicographic filename order. Malformed label lines
/// and missing label files are collected into the diagnostics list, never
/// silently dropped.
pub fn load_dataset<T: Scalar>(
    images_dir: &Path,
    labels_dir: &Path,
    num_classes: usize,
) -> Result<(Vec<Sample<T>>, Vec<String>)> {
    let mut files: Vec<_> = std::fs::read_dir(images_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    files.sort();

    let mut samples = Vec::with_capacity(files.len());
    let mut diagnostics = Vec::new();
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let image = load_image::<T>(&path)?;
        let label_path = labels_dir.join(format!("{stem}.txt"));
        let labels = if label_path.exists() {
            let text = std::fs::read_to_string(&label_path)?;
            parse_label_text(&text, num_classes, &label_path.display().to_string(), &mut diagnostics)
        } else {
            diagnostics.push(format!("{}: missing label file, assuming no boxes", label_path.display()));
            Vec::new()
        };
        samples.push(Sample { name: stem, image, labels });
    }
    Ok((samples, diagnostics))
}

/// Parse YOLO label text. Bad lines go to `diagnostics`.
pub fn parse_label_text(
    text: &str,
    num_classes: usize,
    source: &str,
    diagnostics: &mut Vec<String>,
) -> Vec<GtBox> {
    let mut out = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = (|| -> Option<GtBox> {
            if fields.len() != 5 {
                return None;
            }
            let class_id: usize = fields[0].parse().ok()?;
            let cx: f64 = fields[1].parse().ok()?;
            let cy: f64 = fields[2].parse().ok()?;
            let w: f64 = fields[3].parse().ok()?;
            let h: f64 = fields[4].parse().ok()?;
            Some(GtBox { class_id, cx, cy, w, h })
        })();
        match parsed {
            Some(b) => {
                let in_range = b.class_id < num_classes
                    && (0.0..=1.0).contains(&b.cx)
                    && (0.0..=1.0).contains(&b.cy)
                    && b.w > 0.0
                    && b.h > 0.0
                    && b.w <= 1.0
                    && b.h <= 1.0;
                if in_range {
                    out.push(b);
                } else {
                    diagnostics.push(format!(
                        "{source} line {}: coordinates or class out of range: '{line}'",
                        li + 1
                    ));
                }
            }
            None => diagnostics.push(format!(
                "{source} line {}: malformed label line: '{line}'",
                li + 1
            )),
        }
    }
    out
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(3 * w * h);
    for c in 0..3usize {
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                data.push(real::<T>(px.0[c] as f64 / 255.0));
            }
        }
    }
    FeatureMap::new([1, 3, h, w], data)
}

/// Write a `(1,3,H,W)` map in `[0,1]` as an RGB PNG.
pub fn save_image<T: Scalar>(map: &FeatureMap<T>, path: &Path) -> Result<()> {
    let [_, c, h, w] = map.shape();
    if c != 3 {
        return Err(Error::InvalidArg(format!("save_image needs 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                let v: f64 = num_traits::NumCast::from(map.at(0, ch, y, x)).unwrap();
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Knobs for the synthetic detection corpus.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub n_classes: usize,
    /// Inclusive range of boxes per image.
    pub boxes_per_image: (usize, usize),
    /// Relative class frequencies; box counts follow this ratio exactly
    /// (largest-remainder apportionment over the whole corpus).
    pub class_ratio: Vec<u32>,
    /// Normalized box side range.
    pub size_range: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_images: 200,
            image_size: 64,
            n_classes: 2,
            boxes_per_image: (1, 3),
            class_ratio: vec![1, 1],
            size_range: (0.28, 0.62),
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.88, 0.10, 0.10], // red
    [0.12, 0.25, 0.90], // blue
    [0.95, 0.85, 0.10], // yellow
    [0.85, 0.15, 0.80], // magenta
    [0.10, 0.85, 0.85], // cyan
    [0.95, 0.55, 0.10], // orange
    [0.90, 0.90, 0.90], // white
    [0.10, 0.10, 0.12], // black
];

/// Textured background plus shape/color-coded blobs with exact ground truth.
/// Fully reproducible from the seed.
pub fn synth_corpus<T: Scalar>(seed: u64, spec: &SynthSpec) -> Vec<Sample<T>> {
    assert!(
        spec.n_classes <= PALETTE.len(),
        "at most {} distinguishable classes",
        PALETTE.len()
    );
    assert_eq!(spec.class_ratio.len(), spec.n_classes, "ratio per class");
    let mut rng = StreamRng::new(seed, streams::SYNTH);
    let size = spec.image_size;

    // per-image box counts first, then exact class apportionment
    let counts: Vec<usize> = (0..spec.n_images)
        .map(|_| {
            let (lo, hi) = spec.boxes_per_image;
            lo + rng.below(hi - lo + 1)
        })
        .collect();
    let total: usize = counts.iter().sum();
    let class_sequence = apportion_classes(total, &spec.class_ratio, &mut rng);

    let mut samples = Vec::with_capacity(spec.n_images);
    let mut next_class = class_sequence.into_iter();
    for (i, &n_boxes) in counts.iter().enumerate() {
        let mut image = background::<T>(size, &mut rng);
        let mut labels: Vec<GtBox> = Vec::with_capacity(n_boxes);
        for _ in 0..n_boxes {
            let class_id = next_class.next().expect("apportionment covers all boxes");
            let bbox = place_box(&labels, spec, &mut rng);
            draw_blob(&mut image, size, class_id, bbox);
            labels.push(GtBox { class_id, cx: bbox[0], cy: bbox[1], w: bbox[2], h: bbox[3] });
        }
        samples.push(Sample { name: format!("synth_{i:05}"), image, labels });
    }
    samples
}

fn apportion_classes(total: usize, ratio: &[u32], rng: &mut StreamRng) -> Vec<usize> {
    let weight: u32 = ratio.iter().sum();
    assert!(weight > 0, "class ratio must not be all-zero");
    let mut counts: Vec<usize> = ratio
        .iter()
        .map(|&r| total * r as usize / weight as usize)
        .collect();
    let mut rem: usize = total - counts.iter().sum::<usize>();
    // distribute the remainder by largest fractional part (ties: lower class)
    let mut fracs: Vec<(usize, u64)> = ratio
        .iter()
        .enumerate()
        .map(|(c, &r)| {
            (
                c,
                ((total as u64 * r as u64) % weight as u64),
            )
        })
        .collect();
    fracs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, _) in fracs {
        if rem == 0 {
            break;
        }
        counts[c] += 1;
        rem -= 1;
    }
    let mut seq = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        seq.extend(std::iter::repeat(c).take(n));
    }
    rng.shuffle(&mut seq);
    seq
}

/// Exact class counts for a spec (what the corpus histogram must equal).
pub fn expected_class_counts(total: usize, ratio: &[u32]) -> Vec<usize> {
    let weight: u32 = ratio.iter().sum();
    let mut counts: Vec<usize> = ratio
        .iter()
        .map(|&r| total * r as usize / weight as usize)
        .collect();
    let mut rem: usize = total - counts.iter().sum::<usize>();
    let mut fracs: Vec<(usize, u64)> = ratio
        .iter()
        .enumerate()
        .map(|(c, &r)| (c, (total as u64 * r as u64) % weight as u64))
        .collect();
    fracs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, _) in fracs {
        if rem == 0 {
            break;
        }
        counts[c] += 1;
        rem -= 1;
    }
    counts
}

fn background<T: Scalar>(size: usize, rng: &mut StreamRng) -> FeatureMap<T> {
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let freq = rng.uniform_in(0.05, 0.12);
    let mut noise = vec![0.0f64; size * size];
    for v in noise.iter_mut() {
        *v = rng.uniform_in(-0.05, 0.05);
    }
    FeatureMap::from_fn([1, 3, size, size], |_, c, y, x| {
        let wave = ((x as f64 * freq + y as f64 * freq * 0.7 + phase).sin()) * 0.05;
        let base = match c {
            0 => 0.22,
            1 => 0.38,
            _ => 0.18,
        };
        real::<T>((base + wave + noise[y * size + x]).clamp(0.0, 1.0))
    })
}

fn place_box(existing: &[GtBox], spec: &SynthSpec, rng: &mut StreamRng) -> [f64; 4] {
    let (lo, hi) = spec.size_range;
    let mut candidate = [0.0; 4];
    for _attempt in 0..8 {
        let w = rng.uniform_in(lo, hi);
        let h = rng.uniform_in(lo, hi);
        let cx = rng.uniform_in(w / 2.0 + 0.02, 1.0 - w / 2.0 - 0.02);
        let cy = rng.uniform_in(h / 2.0 + 0.02, 1.0 - h / 2.0 - 0.02);
        candidate = [cx, cy, w, h];
        let cand_box = GtBox { class_id: 0, cx, cy, w, h };
        let crowded = existing.iter().any(|b| {
            crate::detection::iou(&b.as_detection(), &cand_box.as_detection()) > 0.35
        });
        if !crowded {
            break;
        }
    }
    candidate
}

fn draw_blob<T: Scalar>(image: &mut FeatureMap<T>, size: usize, class_id: usize, bbox: [f64; 4]) {
    let [cx, cy, w, h] = bbox;
    let color = PALETTE[class_id % PALETTE.len()];
    let x1 = ((cx - w / 2.0) * size as f64).floor().max(0.0) as usize;
    let x2 = ((cx + w / 2.0) * size as f64).ceil().min(size as f64) as usize;
    let y1 = ((cy - h / 2.0) * size as f64).floor().max(0.0) as usize;
    let y2 = ((cy + h / 2.0) * size as f64).ceil().min(size as f64) as usize;
    let shape = class_id % 3;
    for y in y1..y2 {
        for x in x1..x2 {
            // normalized offsets from the box center in [-1, 1]
            let fx = (x as f64 + 0.5 - cx * size as f64) / (w * size as f64 / 2.0);
            let fy = (y as f64 + 0.5 - cy * size as f64) / (h * size as f64 / 2.0);
            let inside = match shape {
                0 => fx * fx + fy * fy <= 1.0,          // disk
                1 => fx.abs() <= 0.92 && fy.abs() <= 0.92, // square
                _ => fx.abs() + fy.abs() <= 1.0,        // diamond
            };
            if !inside {
                continue;
            }
            let edge = match shape {
                0 => fx * fx + fy * fy > 0.72,
                1 => fx.abs() > 0.75 || fy.abs() > 0.75,
                _ => fx.abs() + fy.abs() > 0.78,
            };
            let shade = if edge { 0.55 } else { 1.0 };
            for c in 0..3 {
                *image.at_mut(0, c, y, x) = real::<T>((color[c] * shade).clamp(0.0, 1.0));
            }
        }
    }
}

/// Mirror an image and its labels horizontally.
pub fn hflip_sample<T: Scalar>(s: &Sample<T>) -> Sample<T> {
    let [n, c, h, w] = s.image.shape();
    let image = FeatureMap::from_fn([n, c, h, w], |ni, ci, y, x| s.image.at(ni, ci, y, w - 1 - x));
    let labels = s
        .labels
        .iter()
        .map(|b| GtBox { cx: 1.0 - b.cx, ..*b })
        .collect();
    Sample { name: s.name.clone(), image, labels }
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Disjoint covering folds with sizes differing by at most one; returns
/// per-fold (train, val) index lists.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::InvalidArg(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidArg(format!("k={k} exceeds {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    StreamRng::new(seed, streams::SPLIT).shuffle(&mut order);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok((0..k)
        .map(|i| {
            let val = folds[i].clone();
            let train = folds
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            (train, val)
        })
        .collect())
}

/// Uniform sample without replacement of `round(fraction * n)` indices
/// (at least one).
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "subset fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    Ok(StreamRng::new(seed, streams::SPLIT).sample_indices(n, k))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ECOWCKP\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-contained model snapshot: graph config text, training metadata and
/// every learnable tensor plus batch-norm buffer as little-endian f32.
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub epoch: u64,
    pub seed: u64,
    pub loss_weights: [f64; 3],
    pub tensors: Vec<(String, [usize; 4], Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &Model<T>,
        epoch: u64,
        seed: u64,
        loss_weights: [f64; 3],
    ) -> Self {
        let mut tensors: Vec<(String, [usize; 4], Vec<f32>)> = Vec::new();
        model.visit_params(&mut |name, p| {
            tensors.push((name, p.shape(), p.cast::<f32>().into_data()));
        });
        model.visit_buffers(&mut |name, data| {
            let shape = [1, data.len(), 1, 1];
            tensors.push((
                name,
                shape,
                data.iter()
                    .map(|&v| num_traits::NumCast::from(v).unwrap())
                    .collect(),
            ));
        });
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_text: model.config.to_text(),
            epoch,
            seed,
            loss_weights,
            tensors,
        }
    }

    /// Rebuild the model this checkpoint was saved from.
    pub fn restore<T: Scalar>(&self) -> Result<Model<T>> {
        let config = GraphConfig::parse(&self.config_text)?;
        let mut model = build_model::<T>(&config, 0)?;
        let mut table: HashMap<String, ([usize; 4], Vec<T>)> = HashMap::new();
        for (name, shape, data) in &self.tensors {
            table.insert(
                name.clone(),
                (*shape, data.iter().map(|&v| real::<T>(v as f64)).collect()),
            );
        }
        model.load_state(&table)?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for w in self.loss_weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(0); // dtype f32
            buf.push(4); // rank
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("config not utf-8: {e}")))?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let loss_weights = [r.f64()?, r.f64()?, r.f64()?];
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("name not utf-8: {e}")))?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
            }
            let rank = r.u8()?;
            if rank != 4 {
                return Err(Error::Checkpoint(format!("unsupported rank {rank}")));
            }
            let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f32()?);
            }
            tensors.push((name, shape, data));
        }
        Ok(Checkpoint { version, config_text, epoch, seed, loss_weights, tensors })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TOY_CONFIG_64;

    #[test]
    fn label_parsing_echo_and_diagnostics() {
        let mut diags = Vec::new();
        let boxes = parse_label_text("2 0.5 0.5 0.25 0.25\n", 3, "t.txt", &mut diags);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].class_id, 2);
        assert!((boxes[0].w - 0.25).abs() < 1e-12);
        assert!(diags.is_empty());

        // one malformed line among three
        let mut diags = Vec::new();
        let boxes = parse_label_text(
            "0 0.5 0.5 0.2 0.2\n1 oops 0.5 0.2 0.2\n1 0.3 0.3 0.1 0.1\n",
            2,
            "t.txt",
            &mut diags,
        );
        assert_eq!(boxes.len(), 2);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].contains("line 2"));

        // empty file -> no boxes, no diagnostics
        let mut diags = Vec::new();
        assert!(parse_label_text("", 2, "t.txt", &mut diags).is_empty());
        assert!(diags.is_empty());

        // out-of-range coordinate is a line-level diagnostic
        let mut diags = Vec::new();
        let boxes = parse_label_text("0 1.5 0.5 0.2 0.2\n", 2, "t.txt", &mut diags);
        assert!(boxes.is_empty());
        assert_eq!(diags.len(), 1);
    }

    #[test]
    fn synth_corpus_is_deterministic() {
        let spec = SynthSpec { n_images: 6, ..Default::default() };
        let a = synth_corpus::<f32>(42, &spec);
        let b = synth_corpus::<f32>(42, &spec);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.labels, y.labels);
        }
        let c = synth_corpus::<f32>(43, &spec);
        assert!(a[0].image.data() != c[0].image.data());
    }

    #[test]
    fn synth_corpus_empty() {
        let spec = SynthSpec { n_images: 0, ..Default::default() };
        assert!(synth_corpus::<f32>(1, &spec).is_empty());
    }

    #[test]
    fn synth_class_histogram_matches_profile_exactly() {
        let spec = SynthSpec {
            n_images: 40,
            n_classes: 3,
            class_ratio: vec![5, 3, 2],
            ..Default::default()
        };
        let corpus = synth_corpus::<f32>(9, &spec);
        let total: usize = corpus.iter().map(|s| s.labels.len()).sum();
        let mut hist = vec![0usize; 3];
        for s in &corpus {
            for b in &s.labels {
                hist[b.class_id] += 1;
            }
        }
        assert_eq!(hist, expected_class_counts(total, &spec.class_ratio));
    }

    #[test]
    fn synth_blob_pixels_stay_inside_their_box() {
        let spec = SynthSpec { n_images: 4, boxes_per_image: (1, 1), ..Default::default() };
        let corpus = synth_corpus::<f64>(5, &spec);
        for s in &corpus {
            let b = s.labels[0];
            let size = spec.image_size;
            let color = PALETTE[b.class_id % PALETTE.len()];
            for y in 0..size {
                for x in 0..size {
                    let close = (0..3).all(|c| {
                        (s.image.at(0, c, y, x) - color[c]).abs() < 0.02
                    });
                    if close {
                        let fx = (x as f64 + 0.5) / size as f64;
                        let fy = (y as f64 + 0.5) / size as f64;
                        assert!(fx >= b.cx - b.w / 2.0 - 0.03 && fx <= b.cx + b.w / 2.0 + 0.03);
                        assert!(fy >= b.cy - b.h / 2.0 - 0.03 && fy <= b.cy + b.h / 2.0 + 0.03);
                    }
                }
            }
        }
    }

    #[test]
    fn hflip_mirrors_labels() {
        let spec = SynthSpec { n_images: 1, ..Default::default() };
        let s = &synth_corpus::<f32>(3, &spec)[0];
        let f = hflip_sample(s);
        for (a, b) in s.labels.iter().zip(&f.labels) {
            assert!((a.cx + b.cx - 1.0).abs() < 1e-12);
            assert_eq!(a.cy, b.cy);
        }
        let ff = hflip_sample(&f);
        assert_eq!(ff.image.data(), s.image.data());
    }

    #[test]
    fn kfold_is_disjoint_and_covering() {
        let folds = kfold_indices(10, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = Vec::new();
        for (train, val) in &folds {
            assert_eq!(val.len(), 2);
            assert_eq!(train.len(), 8);
            for v in val {
                assert!(!train.contains(v), "train and val overlap");
            }
            all.extend(val.iter().copied());
        }
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn kfold_rejects_bad_k() {
        assert!(kfold_indices(3, 5, 0).is_err());
        assert!(kfold_indices(10, 1, 0).is_err());
    }

    #[test]
    fn kfold_deterministic_per_seed() {
        assert_eq!(kfold_indices(20, 4, 9).unwrap(), kfold_indices(20, 4, 9).unwrap());
        assert_ne!(kfold_indices(20, 4, 9).unwrap(), kfold_indices(20, 4, 10).unwrap());
    }

    #[test]
    fn subset_sizes_and_determinism() {
        let s = subset_indices(100, 0.25, 3).unwrap();
        assert_eq!(s.len(), 25);
        assert_eq!(s, subset_indices(100, 0.25, 3).unwrap());
        let all = subset_indices(8, 1.0, 3).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert!(subset_indices(10, 0.0, 1).is_err());
        assert!(subset_indices(10, 1.5, 1).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap();
        let model = build_model::<f32>(&cfg, 11).unwrap();
        let ck = Checkpoint::from_model(&model, 3, 11, [7.5, 0.5, 1.5]);
        let dir = std::env::temp_dir().join("ecoweed_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.seed, 11);
        assert_eq!(back.loss_weights, [7.5, 0.5, 1.5]);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((n1, s1, d1), (n2, s2, d2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            // bit-for-bit
            let b1: Vec<u32> = d1.iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = d2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        // write -> read -> write produces identical bytes
        let path2 = dir.join("m2.ckpt");
        back.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_restores_model_weights() {
        let cfg = GraphConfig::parse(TOY_CONFIG_64).unwrap();
        let model = build_model::<f32>(&cfg, 5).unwrap();
        let ck = Checkpoint::from_model(&model, 0, 5, [7.5, 0.5, 1.5]);
        let restored: Model<f32> = ck.restore().unwrap();
        let mut orig = HashMap::new();
        model.visit_params(&mut |name, p| {
            orig.insert(name, p.data().to_vec());
        });
        restored.visit_params(&mut |name, p| {
            assert_eq!(orig[&name], p.data().to_vec(), "weight drift in {name}");
        });
        // every learnable tensor appears exactly once in the checkpoint
        let mut names: Vec<&str> = ck.tensors.iter().map(|(n, _, _)| n.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(before, names.len(), "duplicate tensor names");
    }
}
