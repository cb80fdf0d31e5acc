//! Animal-disjoint, class-balanced splits and the clip directory layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::plume::{generate_clip, jittered_params, AnimalTraits, ClipDims, ClipSample, FluxClass};
use super::pnm;
use crate::error::{Error, Result};
use crate::model::encoder::check_input_dims;
use crate::numerics::{Rng, Tensor};

/// Reference split sizes (their sum is 439); other dataset sizes keep these proportions.
const SPLIT_WEIGHTS: [usize; 3] = [302, 33, 104];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub clips: usize,
    pub animals: usize,
    pub dims: ClipDims,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            clips: 432,
            animals: 12,
            dims: ClipDims::default(),
            seed: 42,
        }
    }
}

/// Where one clip lives and what it shows, before any pixels are drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipSpec {
    pub index: usize,
    pub id: String,
    pub animal: u32,
    pub label: FluxClass,
    pub split: Split,
}

/// Largest-remainder apportionment of `total` by `weights`; ties go to the earlier slot.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let mut out: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, w)| (total * w % sum, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Per-split counts with every split non-empty.
fn apportion_min1(total: usize, weights: &[usize]) -> Vec<usize> {
    let mut out = apportion(total, weights);
    for i in 0..out.len() {
        if out[i] == 0 {
            let donor = (0..out.len()).max_by_key(|&j| (out[j], usize::MAX - j)).expect("non-empty");
            out[donor] -= 1;
            out[i] = 1;
        }
    }
    out
}

fn validate(cfg: &DatasetConfig) -> Result<()> {
    check_input_dims(cfg.dims.height, cfg.dims.width)?;
    if cfg.dims.frames < 2 {
        return Err(Error::Config("clips need at least two frames".into()));
    }
    if cfg.animals < 3 {
        return Err(Error::Config(format!(
            "{} animals cannot fill three animal-disjoint splits",
            cfg.animals
        )));
    }
    let counts = apportion(cfg.clips, &SPLIT_WEIGHTS);
    if counts[0] < 3 || counts[1] == 0 || counts[2] == 0 {
        return Err(Error::Config(format!(
            "{} clips cannot be stratified into train/val/test (got {counts:?})",
            cfg.clips
        )));
    }
    Ok(())
}

/// Assigns ids, animals, labels and splits.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Vec<ClipSpec>> {
    validate(cfg)?;
    let root = Rng::new(cfg.seed);
    let counts = apportion(cfg.clips, &SPLIT_WEIGHTS);
    let herd = apportion_min1(cfg.animals, &SPLIT_WEIGHTS);
    let mut animals: Vec<u32> = (0..cfg.animals as u32).collect();
    root.child("animals").shuffle(&mut animals);

    let mut plan = Vec::with_capacity(cfg.clips);
    let mut first = 0;
    for (s, split) in Split::ALL.into_iter().enumerate() {
        let group = &animals[first..first + herd[s]];
        first += herd[s];
        let na = group.len();
        for k in 0..counts[s] {
            plan.push((group[(k / 3 + k % 3) % na], FluxClass::ALL[k % 3], split));
        }
    }
    root.child("order").shuffle(&mut plan);
    Ok(plan
        .into_iter()
        .enumerate()
        .map(|(index, (animal, label, split))| ClipSpec {
            index,
            id: format!("clip_{index:04}"),
            animal,
            label,
            split,
        })
        .collect())
}

pub fn animal_traits(seed: u64, animal: u32) -> AnimalTraits {
    AnimalTraits::draw(&mut Rng::new(seed).child_indexed("animal", animal as u64))
}

impl ClipSpec {
    pub fn generate(&self, cfg: &DatasetConfig) -> Result<ClipSample> {
        let traits = animal_traits(cfg.seed, self.animal);
        let rng = Rng::new(cfg.seed).child_indexed("clip", self.index as u64);
        let params = jittered_params(self.label, &traits, &mut rng.child("params"));
        let (frames, gas, masks) = generate_clip(&params, &traits, cfg.dims, &rng)?;
        Ok(ClipSample {
            id: self.id.clone(),
            animal: self.animal,
            label: self.label,
            frames,
            gas,
            masks,
        })
    }
}

/// Clips grouped by split, in plan order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<ClipSample>,
    pub val: Vec<ClipSample>,
    pub test: Vec<ClipSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ClipSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn push(&mut self, split: Split, clip: ClipSample) {
        match split {
            Split::Train => self.train.push(clip),
            Split::Val => self.val.push(clip),
            Split::Test => self.test.push(clip),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates every clip in memory.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for spec in plan_dataset(cfg)? {
        let clip = spec.generate(cfg)?;
        ds.push(spec.split, clip);
    }
    Ok(ds)
}

fn frame_plane(t: &Tensor<f32>, f: usize, channels: usize) -> &[f32] {
    let s = t.shape();
    let n = channels * s[2] * s[3];
    &t.data()[f * n..(f + 1) * n]
}

/// Writes one clip directory: frames, gas maps, masks and `clip.txt`.
pub fn write_clip(dir: &Path, clip: &ClipSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = clip.dims();
    for f in 0..d.frames {
        pnm::write_ppm(&dir.join(format!("frame_{f:02}.ppm")), d.width, d.height, frame_plane(&clip.frames, f, 3))?;
        pnm::write_pgm16(&dir.join(format!("gas_{f:02}.pgm")), d.width, d.height, frame_plane(&clip.gas, f, 1))?;
        let mask: Vec<u8> = frame_plane(&clip.masks, f, 1).iter().map(|&v| (v > 0.5) as u8).collect();
        pnm::write_mask(&dir.join(format!("mask_{f:02}.pgm")), d.width, d.height, &mask)?;
    }
    let meta = format!("label={}\nanimal={}\nframes={}\n", clip.label.name(), clip.animal, d.frames);
    let path = dir.join("clip.txt");
    fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

fn parse_meta(dir: &Path) -> Result<(FluxClass, u32, usize)> {
    let path = dir.join("clip.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (mut label, mut animal, mut frames) = (None, None, None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("{}: malformed line {line:?}", path.display())))?;
        let bad = || Error::Data(format!("{}: bad value for {k}: {v:?}", path.display()));
        match k {
            "label" => label = Some(FluxClass::parse(v).ok_or_else(bad)?),
            "animal" => animal = Some(v.parse().map_err(|_| bad())?),
            "frames" => frames = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(Error::Data(format!("{}: unknown key {k}", path.display()))),
        }
    }
    match (label, animal, frames) {
        (Some(l), Some(a), Some(f)) => Ok((l, a, f)),
        _ => Err(Error::Data(format!("{}: needs label, animal and frames", path.display()))),
    }
}

/// Reads a clip directory written by [`write_clip`]. Masks are optional so
/// that unlabelled clips can be loaded for inference; missing ones come back empty.
pub fn read_clip(dir: &Path) -> Result<ClipSample> {
    let (label, animal, t) = parse_meta(dir)?;
    read_clip_frames(dir, t).map(|(frames, gas, masks)| ClipSample {
        id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        animal,
        label,
        frames,
        gas,
        masks,
    })
}

/// Frames present in a clip directory, counted from `frame_00.ppm` upwards.
pub fn count_frames(dir: &Path) -> usize {
    (0..).take_while(|f| dir.join(format!("frame_{f:02}.ppm")).exists()).count()
}

/// Loads `t` frames with gas maps and (possibly absent) masks.
pub fn read_clip_frames(dir: &Path, t: usize) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    if t == 0 {
        return Err(Error::Data(format!("{}: clip has no frames", dir.display())));
    }
    let (mut frames, mut gas, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    let mut size = None;
    for f in 0..t {
        let (w, h, rgb) = pnm::read_ppm(&dir.join(format!("frame_{f:02}.ppm")))?;
        let (gw, gh, g) = pnm::read_pgm(&dir.join(format!("gas_{f:02}.pgm")))?;
        if (gw, gh) != (w, h) || size.is_some_and(|s| s != (w, h)) {
            return Err(Error::Data(format!("{}: frame {f} size disagrees", dir.display())));
        }
        size = Some((w, h));
        frames.extend(rgb);
        gas.extend(g);
        let mp = dir.join(format!("mask_{f:02}.pgm"));
        if mp.exists() {
            let (mw, mh, m) = pnm::read_pgm(&mp)?;
            if (mw, mh) != (w, h) {
                return Err(Error::Data(format!("{}: mask {f} size disagrees", dir.display())));
            }
            masks.extend(m.into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }));
        } else {
            masks.extend(std::iter::repeat(0.0).take(w * h));
        }
    }
    let (w, h) = size.expect("t > 0");
    Ok((
        Tensor::new(&[t, 3, h, w], frames)?,
        Tensor::new(&[t, 1, h, w], gas)?,
        Tensor::new(&[t, 1, h, w], masks)?,
    ))
}

/// Writes the full dataset under `root` with a `splits.txt` index.
pub fn write_dataset(root: &Path, cfg: &DatasetConfig) -> Result<Vec<ClipSpec>> {
    let plan = plan_dataset(cfg)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index = String::new();
    for spec in &plan {
        let clip = spec.generate(cfg)?;
        write_clip(&root.join(&spec.id), &clip)?;
        let _ = writeln!(index, "{} {}", spec.id, spec.split.name());
    }
    let path = root.join("splits.txt");
    fs::write(&path, index).map_err(|e| Error::io(path, e))?;
    Ok(plan)
}

/// Reads `splits.txt` as `(clip directory, split)` pairs.
pub fn read_splits(root: &Path) -> Result<Vec<(PathBuf, Split)>> {
    let path = root.join("splits.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut it = line.split_whitespace();
            match (it.next(), it.next().and_then(Split::parse), it.next()) {
                (Some(id), Some(split), None) => Ok((root.join(id), split)),
                _ => Err(Error::Data(format!("{}: malformed line {line:?}", path.display()))),
            }
        })
        .collect()
}

/// Loads every clip listed in `splits.txt`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (dir, split) in read_splits(root)? {
        ds.push(split, read_clip(&dir)?);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_reference_sizes() {
        assert_eq!(apportion(439, &SPLIT_WEIGHTS), vec![302, 33, 104]);
        assert_eq!(apportion(432, &SPLIT_WEIGHTS), vec![297, 33, 102]);
        assert_eq!(apportion(120, &SPLIT_WEIGHTS), vec![83, 9, 28]);
        assert_eq!(apportion_min1(12, &SPLIT_WEIGHTS), vec![8, 1, 3]);
        assert_eq!(apportion_min1(3, &SPLIT_WEIGHTS), vec![1, 1, 1]);
    }

    #[test]
    fn apportion_sums_to_total() {
        for n in 0..500 {
            assert_eq!(apportion(n, &SPLIT_WEIGHTS).iter().sum::<usize>(), n);
        }
    }
}
