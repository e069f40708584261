//! Dataset manifest, on-disk layout, and the view loaders feeding the model.
//!
//! Layout: `manifest.json`, `images/<examId>_<view>.png` (16-bit grayscale) and
//! `masks/<examId>_<view>_<class>.png` (8-bit, 0 or 255). Paths inside the
//! manifest are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{GmicError, Result};
use crate::synth::{self, ExamPlan, RenderedView, Side, SynthSpec, View, ViewKind, CLASS_NAMES};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "validation" | "val" => Some(Self::Validation),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExamRecord {
    pub id: String,
    /// Generator index, used to re-render the exam without touching disk.
    pub index: usize,
    pub split: Split,
    /// Per-breast labels over the manifest classes, keyed "L" and "R".
    pub labels: BTreeMap<String, Vec<u8>>,
    /// View name to image path.
    pub views: BTreeMap<String, String>,
    /// View name to class name to mask path; only nonempty masks are listed.
    #[serde(default)]
    pub masks: BTreeMap<String, BTreeMap<String, String>>,
}

impl ExamRecord {
    pub fn label(&self, side: Side, class: usize) -> bool {
        let key = side_key(side);
        self.labels.get(key).and_then(|l| l.get(class)).is_some_and(|&v| v == 1)
    }

    pub fn is_positive(&self) -> bool {
        self.labels.values().flatten().any(|&v| v == 1)
    }

    pub fn breast_id(&self, side: Side) -> String {
        format!("{}_{}", self.id, side_key(side))
    }
}

pub fn side_key(side: Side) -> &'static str {
    match side {
        Side::Left => "L",
        Side::Right => "R",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub classes: Vec<String>,
    /// Generator settings, present when the corpus is synthetic.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    pub exams: Vec<ExamRecord>,
}

impl Manifest {
    /// Manifest of a synthetic corpus, computed from the generator alone.
    pub fn from_spec(spec: &SynthSpec) -> Self {
        let exams = (0..spec.total_exams())
            .map(|i| {
                let split = if i < spec.train_exams {
                    Split::Train
                } else if i < spec.train_exams + spec.validation_exams {
                    Split::Validation
                } else {
                    Split::Test
                };
                record_for(&synth::plan_exam(spec, i), split)
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            image_height: spec.image_height,
            image_width: spec.image_width,
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            synth: Some(spec.clone()),
            exams,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ExamRecord> {
        self.exams.iter().filter(move |e| e.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| GmicError::Data(format!("invalid manifest: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(GmicError::Data(format!(
                "unsupported manifest schema version {}",
                m.schema_version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &m.exams {
            if !seen.insert(&e.id) {
                return Err(GmicError::Data(format!("exam id {} listed twice", e.id)));
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| GmicError::io(path, e))
    }
}

fn record_for(plan: &ExamPlan, split: Split) -> ExamRecord {
    let id = format!("E{:05}", plan.index);
    let mut labels = BTreeMap::new();
    for side in [Side::Left, Side::Right] {
        let l = plan.labels[side.index()];
        labels.insert(side_key(side).to_owned(), l.iter().map(|&b| b as u8).collect());
    }
    let mut views = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for view in View::ALL {
        views.insert(view.name().to_owned(), format!("images/{id}_{}.png", view.name()));
        let mut per_class = BTreeMap::new();
        for lesion in &plan.lesions[view.side.index()] {
            let class = CLASS_NAMES[lesion.class];
            per_class.insert(class.to_owned(), format!("masks/{id}_{}_{class}.png", view.name()));
        }
        if !per_class.is_empty() {
            masks.insert(view.name().to_owned(), per_class);
        }
    }
    ExamRecord {
        id,
        index: plan.index,
        split,
        labels,
        views,
        masks,
    }
}

/// Renders the corpus to `out` and writes its manifest. Exams are rendered on
/// all available cores; output does not depend on the thread count.
pub fn generate_dataset(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    spec.validate("synth")?;
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| GmicError::io(d, e))?;
    }
    let manifest = Manifest::from_spec(spec);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = manifest.exams.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = manifest
            .exams
            .chunks(chunk)
            .map(|records| scope.spawn(move || records.iter().try_for_each(|r| write_exam(spec, r, out))))
            .collect();
        for h in handles {
            h.join().expect("generator thread panicked")?;
        }
        Ok(())
    })?;
    manifest.write(out)?;
    Ok(manifest)
}

fn write_exam(spec: &SynthSpec, record: &ExamRecord, out: &Path) -> Result<()> {
    let plan = synth::plan_exam(spec, record.index);
    for view in View::ALL {
        let r = synth::render_view(spec, &plan, view);
        let path = out.join(&record.views[view.name()]);
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(r.width as u32, r.height as u32, r.pixels)
            .expect("buffer matches dims");
        buf.save(&path).map_err(|e| load_err(record, view, &path, e))?;
        for (class, mask) in r.masks.iter().enumerate() {
            let Some(mask) = mask else { continue };
            let rel = &record.masks[view.name()][CLASS_NAMES[class]];
            let path = out.join(rel);
            let bytes = mask.iter().map(|&m| m * 255).collect();
            let buf = image::GrayImage::from_raw(r.width as u32, r.height as u32, bytes).expect("dims");
            buf.save(&path).map_err(|e| load_err(record, view, &path, e))?;
        }
    }
    Ok(())
}

fn load_err(record: &ExamRecord, view: View, path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> GmicError {
    GmicError::Load {
        what: format!("exam {} view {}", record.id, view.name()),
        path: path.to_owned(),
        source: Box::new(e),
    }
}

/// A raw grayscale view with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn from_u16(height: usize, width: usize, pixels: &[u16]) -> Self {
        Self {
            height,
            width,
            data: pixels.iter().map(|&p| p as f32 / 65535.0).collect(),
        }
    }
}

/// One view with its masks (indexed by manifest class; `None` when absent).
#[derive(Debug, Clone)]
pub struct LoadedView {
    pub image: RawImage,
    pub masks: Vec<Option<Vec<u8>>>,
}

/// Where view pixels come from: files on disk or the generator itself.
pub trait ExamSource: Sync {
    fn manifest(&self) -> &Manifest;

    /// Loads a view; masks are read only when `with_masks` is set.
    fn load_view(&self, record: &ExamRecord, view: View, with_masks: bool) -> Result<LoadedView>;
}

/// Reads the on-disk layout produced by [`generate_dataset`].
pub struct DiskSource {
    root: PathBuf,
    manifest: Manifest,
}

impl DiskSource {
    /// Opens `<dir>/manifest.json` and checks that every referenced file exists.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| GmicError::io(&path, e))?;
        let manifest = Manifest::from_json(&text)?;
        for e in &manifest.exams {
            let files = e.views.values().chain(e.masks.values().flat_map(|m| m.values()));
            for rel in files {
                if !dir.join(rel).is_file() {
                    return Err(GmicError::Data(format!("exam {}: missing file {rel}", e.id)));
                }
            }
        }
        Ok(Self {
            root: dir.to_owned(),
            manifest,
        })
    }
}

impl ExamSource for DiskSource {
    fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn load_view(&self, record: &ExamRecord, view: View, with_masks: bool) -> Result<LoadedView> {
        let rel = record
            .views
            .get(view.name())
            .ok_or_else(|| GmicError::Data(format!("exam {} has no view {}", record.id, view.name())))?;
        let path = self.root.join(rel);
        let img = image::open(&path).map_err(|e| load_err(record, view, &path, e))?.into_luma16();
        let (w, h) = img.dimensions();
        let image = RawImage::from_u16(h as usize, w as usize, img.as_raw());
        let mut masks = vec![None; self.manifest.classes.len()];
        if with_masks {
            if let Some(per_class) = record.masks.get(view.name()) {
                for (ci, class) in self.manifest.classes.iter().enumerate() {
                    let Some(rel) = per_class.get(class) else { continue };
                    let path = self.root.join(rel);
                    let m = image::open(&path).map_err(|e| load_err(record, view, &path, e))?.into_luma8();
                    if m.dimensions() != (w, h) {
                        return Err(GmicError::Data(format!(
                            "exam {} view {}: {class} mask size differs from image",
                            record.id,
                            view.name()
                        )));
                    }
                    masks[ci] = Some(m.as_raw().iter().map(|&v| (v > 127) as u8).collect());
                }
            }
        }
        Ok(LoadedView { image, masks })
    }
}

/// Renders views on demand from the generator; bit-identical to reading the
/// files [`generate_dataset`] would write.
pub struct ProceduralSource {
    spec: SynthSpec,
    manifest: Manifest,
}

impl ProceduralSource {
    pub fn new(spec: SynthSpec) -> Self {
        let manifest = Manifest::from_spec(&spec);
        Self { spec, manifest }
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }
}

impl ExamSource for ProceduralSource {
    fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn load_view(&self, record: &ExamRecord, view: View, with_masks: bool) -> Result<LoadedView> {
        let plan = synth::plan_exam(&self.spec, record.index);
        let RenderedView {
            height,
            width,
            pixels,
            masks,
        } = synth::render_view(&self.spec, &plan, view);
        let masks = if with_masks { masks.into_iter().collect() } else { vec![None, None] };
        Ok(LoadedView {
            image: RawImage::from_u16(height, width, &pixels),
            masks,
        })
    }
}

/// Opens a dataset directory, or renders the configured synthetic corpus when
/// `dir` is `None`.
pub fn open_source(dir: Option<&Path>, spec: &SynthSpec) -> Result<Box<dyn ExamSource>> {
    match dir {
        Some(d) => Ok(Box::new(DiskSource::open(d)?)),
        None => Ok(Box::new(ProceduralSource::new(spec.clone()))),
    }
}

/// Folds an out-of-range index back into `[0, n)` by mirror reflection
/// without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Center-crops (or reflect-pads) a row-major grid to `th x tw`.
pub fn fit_to<T: Copy>(data: &[T], h: usize, w: usize, th: usize, tw: usize, pad_reflect: bool) -> Result<Vec<T>> {
    if (th > h || tw > w) && !pad_reflect {
        return Err(GmicError::Data(format!(
            "image {h}x{w} is smaller than the {th}x{tw} input; enable data.pad_reflect"
        )));
    }
    let oy = (h as isize - th as isize) / 2;
    let ox = (w as isize - tw as isize) / 2;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = reflect(y as isize + oy, h);
        for x in 0..tw {
            out.push(data[sy * w + reflect(x as isize + ox, w)]);
        }
    }
    Ok(out)
}

/// Variance floor used by per-image standardization.
pub const STD_EPS: f64 = 1e-6;

/// Crops or pads to the target size, then standardizes to zero mean and unit
/// variance. Returns a `[1, 1, th, tw]` tensor.
pub fn normalize_image(raw: &RawImage, th: usize, tw: usize, pad_reflect: bool) -> Result<Tensor<f32>> {
    let mut v = fit_to(&raw.data, raw.height, raw.width, th, tw, pad_reflect)?;
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(STD_EPS);
    for x in &mut v {
        *x = ((*x as f64 - mean) * inv) as f32;
    }
    Ok(Tensor::new([1, 1, th, tw], v)?)
}

/// The two views of one breast, normalized, plus the breast's labels.
#[derive(Debug, Clone)]
pub struct BreastSample {
    pub breast_id: String,
    pub side: Side,
    /// CC then MLO.
    pub views: [Tensor<f32>; 2],
    pub labels: Vec<f32>,
    /// Per view, per class masks cropped like the image (evaluation only).
    pub masks: Option<[Vec<Option<Vec<u8>>>; 2]>,
}

pub const BREAST_VIEWS: [ViewKind; 2] = [ViewKind::Cc, ViewKind::Mlo];

/// Loads and normalizes both views of a breast.
pub fn load_breast(
    source: &dyn ExamSource,
    record: &ExamRecord,
    side: Side,
    th: usize,
    tw: usize,
    pad_reflect: bool,
    with_masks: bool,
) -> Result<BreastSample> {
    let classes = source.manifest().classes.len();
    let mut views = Vec::with_capacity(2);
    let mut masks = Vec::with_capacity(2);
    for kind in BREAST_VIEWS {
        let lv = source.load_view(record, View { side, kind }, with_masks)?;
        let (h, w) = (lv.image.height, lv.image.width);
        views.push(normalize_image(&lv.image, th, tw, pad_reflect)?);
        if with_masks {
            let cropped = lv
                .masks
                .iter()
                .map(|m| m.as_ref().map(|m| fit_to(m, h, w, th, tw, pad_reflect)).transpose())
                .collect::<Result<Vec<_>>>()?;
            masks.push(cropped);
        }
    }
    let labels = (0..classes).map(|c| record.label(side, c) as u8 as f32).collect();
    let views: [Tensor<f32>; 2] = views.try_into().expect("two views");
    Ok(BreastSample {
        breast_id: record.breast_id(side),
        side,
        views,
        labels,
        masks: if with_masks { Some(masks.try_into().expect("two views")) } else { None },
    })
}

/// Every breast of a split in manifest order, loaded lazily.
pub fn iterate_split<'a>(
    source: &'a dyn ExamSource,
    split: Split,
    th: usize,
    tw: usize,
    pad_reflect: bool,
    with_masks: bool,
) -> impl Iterator<Item = Result<BreastSample>> + 'a {
    source.manifest().split(split).flat_map(move |r| {
        [Side::Left, Side::Right]
            .into_iter()
            .map(move |side| load_breast(source, r, side, th, tw, pad_reflect, with_masks))
    })
}
