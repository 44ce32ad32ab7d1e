//! Synthetic skeleton data: shape rasterization, brute-force medial axes,
//! binary PGM I/O and the on-disk dataset layout.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{self, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn from_mask(m: &Mask) -> Self {
        Raster {
            width: m.width,
            height: m.height,
            data: m.data.iter().map(|&v| if v { 255 } else { 0 }).collect(),
        }
    }

    /// Pixels at or above 128.
    pub fn to_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v >= 128).collect(),
        }
    }
}

pub fn write_pgm(r: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

fn pgm_error(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        format: "PGM",
        offset,
        msg: msg.into(),
    }
}

pub fn read_pgm(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 2 {
        return Err(pgm_error(0, "missing magic"));
    }
    if &bytes[..2] != b"P5" {
        return Err(pgm_error(
            0,
            format!("unsupported magic `{}`, expected `P5`", String::from_utf8_lossy(&bytes[..2])),
        ));
    }
    let mut pos = 2;
    let field = |pos: &mut usize, name: &str| -> Result<usize> {
        // Whitespace and comments before each header number.
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
            *pos += 1;
        }
        if start == *pos {
            return Err(pgm_error(start, format!("expected {name}")));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .unwrap()
            .parse()
            .map_err(|_| pgm_error(start, format!("{name} out of range")))
    };
    let width = field(&mut pos, "width")?;
    let height = field(&mut pos, "height")?;
    let maxval_at = pos;
    let maxval = field(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(pgm_error(maxval_at, format!("maxval must be 255, got {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(pgm_error(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| pgm_error(pos, "image dimensions overflow"))?;
    if bytes.len() - pos < n {
        return Err(pgm_error(bytes.len(), format!("truncated payload: need {n} bytes, have {}", bytes.len() - pos)));
    }
    Ok(Raster {
        width,
        height,
        data: bytes[pos..pos + n].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Raster,
    /// Skeleton mask.
    pub gt: Mask,
}

impl Sample {
    /// Image scaled to `[-1, 1]` as a `[1, 1, H, W]` tensor.
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        let r = &self.image;
        Tensor::from_fn([1, 1, r.height, r.width], |_, _, y, x| {
            T::from_f64_lossy(r.get(x, y) as f64 / 127.5 - 1.0)
        })
    }

    pub fn gt_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.gt.to_tensor()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Capsule { x0: f64, y0: f64, x1: f64, y1: f64, r: f64 },
}

impl Shape {
    /// Whether the pixel centre `(x, y)` lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Capsule { x0, y0, x1, y1, r } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0)
                };
                let (px, py) = (x0 + t * dx - x, y0 + t * dy - y);
                px * px + py * py <= r * r
            }
        }
    }

    pub fn rasterize(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| self.contains(x as f64, y as f64))
    }
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

/// Background pixels 4-adjacent to the foreground, including positions just
/// outside the image.
fn boundary_points(mask: &Mask) -> Vec<(i64, i64)> {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = Vec::new();
    for y in -1..=h {
        for x in -1..=w {
            if mask.get_or_false(x, y) {
                continue;
            }
            if [(0, -1), (0, 1), (1, 0), (-1, 0)]
                .iter()
                .any(|&(dx, dy)| mask.get_or_false(x + dx, y + dy))
            {
                out.push((x as i64, y as i64));
            }
        }
    }
    out
}

/// Exact squared distance to the boundary with every tied nearest witness.
fn witnesses(mask: &Mask) -> (Vec<i64>, Vec<Vec<(i64, i64)>>) {
    let boundary = boundary_points(mask);
    let n = mask.data.len();
    let mut dist = vec![i64::MAX; n];
    let mut wit = vec![Vec::new(); n];
    for i in (0..n).filter(|&i| mask.data[i]) {
        let (px, py) = ((i % mask.width) as i64, (i / mask.width) as i64);
        for &(bx, by) in &boundary {
            let d = (bx - px).pow(2) + (by - py).pow(2);
            if d < dist[i] {
                dist[i] = d;
                wit[i].clear();
            }
            if d == dist[i] {
                wit[i].push((bx, by));
            }
        }
    }
    (dist, wit)
}

/// Whether `p` sees two nearest boundary points (its own, or one of a
/// neighbour no farther from the boundary) at an angle of at least 120
/// degrees. The points must also be well separated: more than two diagonal
/// steps, and more than `sqrt(2)` times the distance of `p`, which rejects
/// the short branches a staircase boundary would otherwise sprout.
fn is_ridge(mask: &Mask, dist: &[i64], wit: &[Vec<(i64, i64)>], x: usize, y: usize) -> bool {
    let i = y * mask.width + x;
    let p = (x as i64, y as i64);
    let min_sep = (2 * dist[i]).max(8);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (qx, qy) = (x as isize + dx, y as isize + dy);
            if !mask.get_or_false(qx, qy) {
                continue;
            }
            let j = qy as usize * mask.width + qx as usize;
            if dist[j] > dist[i] {
                continue;
            }
            for &b1 in &wit[i] {
                for &b2 in &wit[j] {
                    let u = (b1.0 - p.0, b1.1 - p.1);
                    let v = (b2.0 - p.0, b2.1 - p.1);
                    let dot = (u.0 * v.0 + u.1 * v.1) as f64;
                    let nu = ((u.0 * u.0 + u.1 * u.1) as f64).sqrt();
                    let nv = ((v.0 * v.0 + v.1 * v.1) as f64).sqrt();
                    let sep = (b1.0 - b2.0).pow(2) + (b1.1 - b2.1).pow(2);
                    if dot <= -0.5 * nu * nv && sep > min_sep {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Medial axis of a binary shape.
///
/// Exact distances to the boundary come from exhaustive search. Pixels are
/// then peeled in order of increasing distance while they are simple, except
/// end points that lie on a ridge of the distance map. The result keeps the
/// topology of the shape and is thinned to unit width.
pub fn medial_axis(mask: &Mask) -> Mask {
    let (dist, wit) = witnesses(mask);
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = mask.clone();
    let mut heap: BinaryHeap<Reverse<(i64, usize)>> =
        (0..mask.data.len()).filter(|&i| mask.data[i]).map(|i| Reverse((dist[i], i))).collect();
    let mut ridge: Vec<Option<bool>> = vec![None; mask.data.len()];
    while let Some(Reverse((_, i))) = heap.pop() {
        if !out.data[i] {
            continue;
        }
        let (x, y) = ((i % mask.width) as isize, (i / mask.width) as isize);
        let n = eval::neighbourhood(&out, x, y);
        if !eval::is_simple(n) {
            continue;
        }
        if n.iter().filter(|&&v| v).count() == 1 {
            let r = *ridge[i].get_or_insert_with(|| is_ridge(mask, &dist, &wit, x as usize, y as usize));
            if r {
                continue;
            }
        }
        out.data[i] = false;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && nx < w && ny < h {
                    let j = (ny * w + nx) as usize;
                    if out.data[j] {
                        heap.push(Reverse((dist[j], j)));
                    }
                }
            }
        }
    }
    eval::thin(&out)
}

pub const MIN_SHAPE_AREA: usize = 40;
const MAX_RETRIES: usize = 100;

fn random_shape(rng: &mut ChaCha8Rng, size: f64) -> Shape {
    let margin = size * 0.15;
    let pos = |rng: &mut ChaCha8Rng| rng.gen_range(margin..size - margin);
    match rng.gen_range(0..3) {
        0 => {
            let (cx, cy) = (pos(rng), pos(rng));
            Shape::Ellipse {
                cx,
                cy,
                rx: rng.gen_range(0.07..0.25) * size,
                ry: rng.gen_range(0.05..0.15) * size,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        }
        1 => {
            let (cx, cy) = (pos(rng), pos(rng));
            Shape::Rect {
                cx,
                cy,
                hw: rng.gen_range(0.07..0.25) * size,
                hh: rng.gen_range(0.04..0.12) * size,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        }
        _ => Shape::Capsule {
            x0: pos(rng),
            y0: pos(rng),
            x1: pos(rng),
            y1: pos(rng),
            r: rng.gen_range(0.03..0.09) * size,
        },
    }
}

/// Smooth noise: random values on a coarse lattice, bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let step = size as f64 / cells as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = ((x as f64 + 0.5) / step, (y as f64 + 0.5) / step);
            let (ix, iy) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let at = |i: usize, j: usize| lattice[j * g + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A generated sample with the shapes it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub sample: Sample,
    pub seed: u64,
    pub shapes: Vec<Shape>,
    pub foreground: Mask,
}

/// Draws 1-3 shapes over a textured background; the label is the medial axis
/// of their union.
pub fn gen_sample(seed: u64, size: usize) -> Result<Generated> {
    if size < 32 || size % 16 != 0 {
        return Err(Error::invalid(
            "gen_sample",
            format!("size must be a multiple of 16 and at least 32, got {size}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=3);
    let mut shapes = Vec::with_capacity(count);
    let mut fg = Mask::new(size, size);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_RETRIES {
            let s = random_shape(&mut rng, size as f64);
            let m = s.rasterize(size, size);
            if m.count() < MIN_SHAPE_AREA {
                continue;
            }
            for (d, v) in fg.data.iter_mut().zip(&m.data) {
                *d |= *v;
            }
            shapes.push(s);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Dataset(format!(
                "seed {seed}: no shape with area >= {MIN_SHAPE_AREA} after {MAX_RETRIES} draws"
            )));
        }
    }
    let gt = medial_axis(&fg);
    if gt.count() == 0 {
        return Err(Error::Dataset(format!("seed {seed}: empty skeleton")));
    }

    let texture = value_noise(&mut rng, size, 6);
    let bg_level = rng.gen_range(0.3..0.7);
    let contrast = rng.gen_range(0.25..0.4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut image = Raster::new(size, size);
    for (i, px) in image.data.iter_mut().enumerate() {
        let mut v = bg_level + 0.08 * texture[i] + 0.03 * normal(&mut rng);
        if fg.data[i] {
            v += contrast;
        }
        *px = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    Ok(Generated {
        sample: Sample {
            id: String::new(),
            image,
            gt,
        },
        seed,
        shapes,
        foreground: fg,
    })
}

/// Per-sample seeds derived from a dataset seed.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate(count: usize, size: usize, seed: u64) -> Result<Vec<Generated>> {
    (0..count)
        .map(|i| {
            let mut g = gen_sample(sample_seed(seed, i), size)?;
            g.sample.id = format!("{i:05}");
            Ok(g)
        })
        .collect()
}

/// Writes `images/`, `labels/` and `manifest.csv` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Generated]) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = String::from("id,seed,shape_count\n");
    for g in samples {
        let s = &g.sample;
        let ip = images.join(format!("{}.pgm", s.id));
        fs::write(&ip, write_pgm(&s.image)).map_err(|e| Error::io(&ip, e))?;
        let lp = labels.join(format!("{}.pgm", s.id));
        fs::write(&lp, write_pgm(&Raster::from_mask(&s.gt))).map_err(|e| Error::io(&lp, e))?;
        let _ = writeln!(manifest, "{},{},{}", s.id, g.seed, g.shapes.len());
    }
    let mp = dir.join("manifest.csv");
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))
}

fn pgm_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Loads `images/*.pgm` paired with `labels/*.pgm` by stem, sorted by stem.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let images = pgm_stems(&dir.join("images"))?;
    let labels = pgm_stems(&dir.join("labels"))?;
    let orphans: Vec<String> = images
        .iter()
        .filter(|s| labels.binary_search(s).is_err())
        .map(|s| format!("images/{s}.pgm"))
        .chain(
            labels
                .iter()
                .filter(|s| images.binary_search(s).is_err())
                .map(|s| format!("labels/{s}.pgm")),
        )
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!("unmatched files: {}", orphans.join(", "))));
    }
    images
        .into_iter()
        .map(|stem| {
            let image = read_raster(&dir.join("images").join(format!("{stem}.pgm")))?;
            let label = read_raster(&dir.join("labels").join(format!("{stem}.pgm")))?;
            if (image.width, image.height) != (label.width, label.height) {
                return Err(Error::Dataset(format!(
                    "pair `{stem}`: image is {}x{}, label is {}x{}",
                    image.width, image.height, label.width, label.height
                )));
            }
            Ok(Sample {
                id: stem,
                image,
                gt: label.to_mask(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_bytes() {
        let r = Raster::new(1, 1);
        let mut want = b"P5\n1 1\n255\n".to_vec();
        want.push(0);
        assert_eq!(write_pgm(&r), want);
        assert_eq!(read_pgm(&want).unwrap(), r);
    }

    #[test]
    fn pgm_rejects_ascii_and_truncation() {
        let err = read_pgm(b"P2\n1 1\n255\n0\n").unwrap_err();
        assert!(err.to_string().contains("P2"), "{err}");
        let err = read_pgm(b"P5\n4 4\n255\nabc").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 14, .. }), "{err}");
        assert!(read_pgm(b"P5\n# note\n2 1\n255\n\x01\x02").is_ok());
        assert!(read_pgm(b"P5\n2 1\n65535\n\x01\x02").is_err());
    }

    #[test]
    fn rectangle_axis_has_central_segment() {
        for (w, h) in [(30usize, 10usize), (31, 11), (24, 7)] {
            let size = 48;
            let (x0, y0) = (5, 9);
            let m = Mask::from_fn(size, size, |x, y| (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y));
            let axis = medial_axis(&m);
            // Longest horizontal run of skeleton pixels within one row.
            let mut best = (0, 0);
            for y in 0..size {
                let mut run = 0;
                for x in 0..size {
                    run = if axis.get(x, y) { run + 1 } else { 0 };
                    if run > best.0 {
                        best = (run, y);
                    }
                }
            }
            assert!(best.0 + h >= w, "{w}x{h}: run {}", best.0);
            let centre = y0 as f64 + (h as f64 - 1.0) / 2.0;
            assert!((best.1 as f64 - centre).abs() <= 0.5, "{w}x{h}: row {}", best.1);
        }
    }

    #[test]
    fn disk_axis_is_its_centre() {
        for (cx, cy, r) in [(20.0, 20.0, 8.0), (20.5, 20.5, 9.0), (15.0, 17.5, 6.5)] {
            let disk = Shape::Ellipse { cx, cy, rx: r, ry: r, angle: 0.0 }.rasterize(40, 40);
            let axis = medial_axis(&disk);
            assert!(axis.count() > 0);
            for (x, y) in axis.points() {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                assert!(d <= 1.0 + 1e-9, "({cx},{cy}) r={r}: pixel ({x},{y}) at {d}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        for seed in 0..6 {
            let a = gen_sample(seed, 64).unwrap();
            assert_eq!(a, gen_sample(seed, 64).unwrap());
            assert!(a.sample.gt.count() > 0);
            for (x, y) in a.sample.gt.points() {
                assert!(a.foreground.get(x, y));
            }
            assert_eq!(eval::thin(&a.sample.gt), a.sample.gt);
        }
        assert!(gen_sample(1, 24).is_err());
    }
}
