//! Image-directory datasets, splitting, batching and a synthetic corpus.

mod augment;
mod pnm;
mod synth;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{augment, flip_horizontal, rotate_nearest, shift_edge, AugmentFlags};
pub use pnm::PnmImage;
pub use synth::synth_dataset;

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub image_size: usize,
    /// Skip unreadable images instead of aborting.
    pub skip_bad: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { image_size: 192, skip_bad: false }
    }
}

/// Bilinear resize of `[C,H,W]` to `[C,out_h,out_w]` with half-pixel
/// centres and clamped borders.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return config_err(format!("resize expects [C,H,W], got {:?}", img.shape()));
    };
    if out_h == 0 || out_w == 0 {
        return config_err("resize target must be positive");
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = src.floor() as usize;
                (lo, (lo + 1).min(len - 1), src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

fn is_pnm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Reads `<root>/<class>/*.ppm|*.pgm`. Classes are numbered in
/// lexicographic directory order and every image is resized to
/// `image_size` square.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let class_dirs: Vec<_> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Ingest(format!("no class directories under {}", root.display())));
    }
    let mut ds = Dataset::default();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().expect("directory entry has a name").to_string_lossy().into_owned();
        let mut found = 0;
        for path in sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_pnm(p)) {
            let decoded = fs::read(&path)
                .map_err(|e| e.to_string())
                .and_then(|bytes| PnmImage::decode(&bytes));
            let img = match decoded {
                Ok(img) => img,
                Err(_) if opts.skip_bad => continue,
                Err(message) => return Err(Error::Image { path, message }),
            };
            let pixels = resize_bilinear(&img.to_tensor(), opts.image_size, opts.image_size)?;
            let file = path.file_name().expect("file has a name").to_string_lossy();
            ds.samples.push(LabeledSample { pixels, label, source_id: format!("{name}/{file}") });
            found += 1;
        }
        if found == 0 {
            return Err(Error::Ingest(format!("class directory {name} contains no readable images")));
        }
        ds.class_names.push(name);
    }
    Ok(ds)
}

/// Writes every sample as an 8-bit PPM under `<root>/<class>/`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for name in &ds.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    for (i, s) in ds.samples.iter().enumerate() {
        let path = root.join(&ds.class_names[s.label]).join(format!("{i:05}.ppm"));
        fs::write(path, PnmImage::from_tensor(&s.pixels)?.encode())?;
    }
    Ok(())
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        config_err(format!("train fraction {f} outside [0, 1]"))
    }
}

/// Seeded shuffle, then the first `floor(train_fraction·N)` samples train.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    check_fraction(train_fraction)?;
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * ds.len() as f64).floor() as usize;
    Ok((ds.subset(&idx[..n_train]), ds.subset(&idx[n_train..])))
}

/// Like [`split`], but per-class quotas follow the class proportions
/// (largest remainder), still totalling `floor(train_fraction·N)`.
pub fn split_stratified(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    check_fraction(train_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let n_train = (train_fraction * ds.len() as f64).floor() as usize;
    let exact: Vec<f64> = by_class.iter().map(|m| train_fraction * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - quota[b] as f64).total_cmp(&(exact[a] - quota[a] as f64)).then(a.cmp(&b)));
    let mut missing = n_train - quota.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[k] < by_class[k].len() {
            quota[k] += 1;
            missing -= 1;
        }
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::new();
    for (members, q) in by_class.iter().zip(&quota) {
        train.extend_from_slice(&members[..*q]);
        test.extend_from_slice(&members[*q..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Sample order for one epoch; shuffled orders are seeded by `(seed, epoch)`.
pub fn epoch_order(len: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&epoch.to_le_bytes());
        idx.shuffle(&mut ChaCha8Rng::from_seed(key));
    }
    idx
}

/// Stacks the given samples into `[N,3,H,W]` and their labels.
pub fn collate(ds: &Dataset, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let Some(&first) = idx.first() else {
        return config_err("cannot collate an empty batch");
    };
    let shape = ds.samples[first].pixels.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * ds.samples[first].pixels.numel());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &ds.samples[i];
        if s.pixels.shape() != shape.as_slice() {
            return Err(Error::Contract(format!("sample {} has shape {:?}, batch expects {shape:?}", s.source_id, s.pixels.shape())));
        }
        data.extend_from_slice(s.pixels.data());
        labels.push(s.label);
    }
    let mut full = vec![idx.len()];
    full.extend(shape);
    Ok((Tensor::new(full, data)?, labels))
}

/// Iterator over `(images, labels)` batches; the last batch may be short.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = collate(self.ds, &self.order[self.pos..end]).expect("dataset samples share one shape");
        self.pos = end;
        Some(batch)
    }
}

pub fn batches(ds: &Dataset, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return config_err("batch_size must be positive");
    }
    if let Some(first) = ds.samples.first() {
        if ds.samples.iter().any(|s| s.pixels.shape() != first.pixels.shape()) {
            return Err(Error::Contract("dataset samples differ in shape".into()));
        }
    }
    Ok(Batches { ds, order: epoch_order(ds.len(), shuffle, seed, epoch), batch_size, pos: 0 })
}
