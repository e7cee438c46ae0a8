//! Deterministic synthetic inspection images.
//!
//! Each client photographs its own variant of the same object and has its own
//! defect type. OKAY, HIDDEN and EMPTY look alike across clients; NOT_OKAY
//! carries a client-unique signature. A fourth object variant with only OKAY
//! and HIDDEN images serves as the external hold-out set.

use std::fmt;

use thiserror::Error;

use crate::nn::NUM_CLASSES;
use crate::rng::CounterRng;

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;

/// Default per-client totals.
pub const DEFAULT_TOTALS: [usize; 3] = [400, 300, 300];
/// Default class proportions in percent (OKAY, NOT_OKAY, HIDDEN, EMPTY).
pub const DEFAULT_PROPORTIONS: [usize; NUM_CLASSES] = [40, 30, 20, 10];

pub const EXTERNAL_TOTAL: usize = 300;
pub const EXTERNAL_HIDDEN: usize = 25;
pub const EXTERNAL_PATTERN: u8 = 4;

const MAX_SHIFT: i64 = 2;
const MAX_BRIGHTNESS: f64 = 0.15;
const OCCLUSION: usize = 8;
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Okay = 0,
    NotOkay = 1,
    Hidden = 2,
    Empty = 3,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Okay, Class::NotOkay, Class::Hidden, Class::Empty];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Okay => "OKAY",
            Class::NotOkay => "NOT_OKAY",
            Class::Hidden => "HIDDEN",
            Class::Empty => "EMPTY",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: [f64; PIXELS],
    pub label: Class,
}

impl LabeledImage {
    pub fn sample(&self) -> (&[f64], usize) {
        (&self.pixels, self.label.index())
    }
}

/// Iterator adapter for [`crate::nn::evaluate`] and batch construction.
pub fn samples(images: &[LabeledImage]) -> impl Iterator<Item = (&[f64], usize)> {
    images.iter().map(LabeledImage::sample)
}

/// Client-unique defect, drawn on the object in NOT_OKAY images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DefectSignature {
    /// Bright patch near the lower-left corner (sticker / scratch).
    CornerPatch = 1,
    /// Dark hole in the middle of the body (damage).
    CenterHole = 2,
    /// Bright horizontal stripe along the bottom edge (rust).
    Stripe = 3,
}

impl DefectSignature {
    pub const ALL: [DefectSignature; 3] = [Self::CornerPatch, Self::CenterHole, Self::Stripe];

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Self::CornerPatch),
            2 => Some(Self::CenterHole),
            3 => Some(Self::Stripe),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Additive pixel deltas in the unshifted object frame.
    pub fn template(self) -> [f64; PIXELS] {
        let mut t = [0.0; PIXELS];
        let (rows, cols, delta) = match self {
            Self::CornerPatch => (9..12, 3..6, 0.40),
            Self::CenterHole => (8..11, 7..10, -0.55),
            Self::Stripe => (12..13, 6..14, 0.40),
        };
        for r in rows {
            for c in cols.clone() {
                t[r * SIDE + c] = delta;
            }
        }
        t
    }
}

struct PatternShape {
    body_rows: (usize, usize),
    body_cols: (usize, usize),
    body_level: f64,
    chamfer: usize,
    port_rows: (usize, usize),
    port_cols: (usize, usize),
    port_level: f64,
    tongue: Option<(usize, (usize, usize), f64)>,
}

/// Clean object image for pattern variant `id` (1..=3 clients, 4 external).
pub fn base_pattern(id: u8) -> [f64; PIXELS] {
    let shape = match id {
        1 => PatternShape {
            body_rows: (2, 14),
            body_cols: (2, 14),
            body_level: 0.60,
            chamfer: 3,
            port_rows: (3, 7),
            port_cols: (5, 11),
            port_level: 0.25,
            tongue: None,
        },
        2 => PatternShape {
            body_rows: (2, 14),
            body_cols: (3, 13),
            body_level: 0.55,
            chamfer: 0,
            port_rows: (3, 7),
            port_cols: (5, 11),
            port_level: 0.20,
            tongue: None,
        },
        3 => PatternShape {
            body_rows: (2, 14),
            body_cols: (3, 13),
            body_level: 0.45,
            chamfer: 1,
            port_rows: (3, 7),
            port_cols: (6, 10),
            port_level: 0.20,
            tongue: None,
        },
        _ => PatternShape {
            body_rows: (2, 14),
            body_cols: (3, 13),
            body_level: 0.52,
            chamfer: 2,
            port_rows: (3, 7),
            port_cols: (5, 11),
            port_level: 0.30,
            tongue: Some((5, (6, 10), 0.42)),
        },
    };
    let mut img = [0.0; PIXELS];
    let (top, bottom) = shape.body_rows;
    let (left, right) = shape.body_cols;
    for r in top..bottom {
        for c in left..right {
            let dr = (r - top).min(bottom - 1 - r);
            let dc = (c - left).min(right - 1 - c);
            if dr + dc < shape.chamfer {
                continue;
            }
            img[r * SIDE + c] = shape.body_level;
        }
    }
    for r in shape.port_rows.0..shape.port_rows.1 {
        for c in shape.port_cols.0..shape.port_cols.1 {
            img[r * SIDE + c] = shape.port_level;
        }
    }
    if let Some((row, (c0, c1), level)) = shape.tongue {
        for c in c0..c1 {
            img[row * SIDE + c] = level;
        }
    }
    img
}

/// Translates an image by `(dy, dx)` pixels, filling with zeros.
pub fn shift(img: &[f64; PIXELS], dy: i64, dx: i64) -> [f64; PIXELS] {
    let mut out = [0.0; PIXELS];
    for r in 0..SIDE as i64 {
        for c in 0..SIDE as i64 {
            let (sr, sc) = (r - dy, c - dx);
            if (0..SIDE as i64).contains(&sr) && (0..SIDE as i64).contains(&sc) {
                out[(r * SIDE as i64 + c) as usize] = img[(sr * SIDE as i64 + sc) as usize];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataSpec {
    pub client_id: u32,
    pub base_pattern_id: u8,
    pub defect: DefectSignature,
    /// Images per class, indexed by [`Class::index`].
    pub counts: [usize; NUM_CLASSES],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ClientDataSpec {
    /// Client `k` in 1..=3: pattern `k`, defect `k`, default totals and proportions.
    pub fn default_for(client_id: u32, seed: u64) -> Result<Self, DataError> {
        if !(1..=3).contains(&client_id) {
            return Err(DataError::Precondition(format!(
                "default data exists for clients 1..=3, not {client_id}"
            )));
        }
        let total = DEFAULT_TOTALS[client_id as usize - 1];
        let mut counts = [0; NUM_CLASSES];
        for (c, p) in counts.iter_mut().zip(DEFAULT_PROPORTIONS) {
            *c = total * p / 100;
        }
        Ok(Self {
            client_id,
            base_pattern_id: client_id as u8,
            defect: DefectSignature::from_id(client_id as u8).expect("ids 1..=3 are defined"),
            counts,
            noise_sigma: 0.05,
            seed: seed ^ crate::rng::mix64(0xDA7A_0000 | client_id as u64),
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub client_id: u32,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Object image before noise: shifted base with lighting offset and, optionally, a defect.
fn render_object(base: &[f64; PIXELS], defect: Option<DefectSignature>, rng: &mut CounterRng) -> [f64; PIXELS] {
    let dy = rng.range_inclusive(-MAX_SHIFT, MAX_SHIFT);
    let dx = rng.range_inclusive(-MAX_SHIFT, MAX_SHIFT);
    let brightness = rng.uniform(-MAX_BRIGHTNESS, MAX_BRIGHTNESS);
    let mut obj = *base;
    for v in obj.iter_mut() {
        if *v > 0.0 {
            *v += brightness;
        }
    }
    if let Some(d) = defect {
        for (v, t) in obj.iter_mut().zip(d.template()) {
            *v += t;
        }
    }
    shift(&obj, dy, dx)
}

fn add_noise(img: &mut [f64; PIXELS], sigma: f64, rng: &mut CounterRng) {
    for v in img.iter_mut() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
}

fn render(
    class: Class,
    base: &[f64; PIXELS],
    defect: DefectSignature,
    sigma: f64,
    rng: &mut CounterRng,
) -> [f64; PIXELS] {
    match class {
        Class::Okay => {
            let mut img = render_object(base, None, rng);
            add_noise(&mut img, sigma, rng);
            img
        }
        Class::NotOkay => {
            let mut img = render_object(base, Some(defect), rng);
            add_noise(&mut img, sigma, rng);
            img
        }
        Class::Hidden => {
            let mut img = render_object(base, None, rng);
            add_noise(&mut img, sigma, rng);
            let r0 = rng.below((SIDE - OCCLUSION + 1) as u64) as usize;
            let c0 = rng.below((SIDE - OCCLUSION + 1) as u64) as usize;
            for r in r0..r0 + OCCLUSION {
                for c in c0..c0 + OCCLUSION {
                    img[r * SIDE + c] = 0.0;
                }
            }
            img
        }
        Class::Empty => {
            let level = 0.3 + rng.uniform(-MAX_BRIGHTNESS, MAX_BRIGHTNESS);
            let mut img = [level; PIXELS];
            add_noise(&mut img, (3.0 * sigma).max(0.1), rng);
            img
        }
    }
}

fn generate_images(
    pattern_id: u8,
    defect: DefectSignature,
    counts: &[usize; NUM_CLASSES],
    sigma: f64,
    seed: u64,
) -> Vec<LabeledImage> {
    let base = base_pattern(pattern_id);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for class in Class::ALL {
        for i in 0..counts[class.index()] {
            let mut rng = CounterRng::stream(seed, ((class.index() as u64) << 32) | i as u64);
            out.push(LabeledImage {
                pixels: render(class, &base, defect, sigma, &mut rng),
                label: class,
            });
        }
    }
    out
}

/// Generates a client's images and splits them with a seeded shuffle:
/// the first `floor(split_ratio * n)` go to train.
pub fn generate_client_shard(spec: &ClientDataSpec, split_ratio: f64) -> Result<Shard, DataError> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(DataError::Precondition(format!(
            "split ratio must lie in (0, 1), got {split_ratio}"
        )));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(DataError::Precondition(format!("invalid noise sigma {}", spec.noise_sigma)));
    }
    let n = spec.total();
    let n_train = (split_ratio * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(DataError::Precondition(format!(
            "split ratio {split_ratio} leaves an empty partition of {n} images"
        )));
    }
    let images = generate_images(spec.base_pattern_id, spec.defect, &spec.counts, spec.noise_sigma, spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    CounterRng::stream(spec.seed, SPLIT_STREAM).shuffle(&mut order);
    let mut slots: Vec<Option<LabeledImage>> = images.into_iter().map(Some).collect();
    let mut take = |idx: &usize| slots[*idx].take().expect("permutation visits each index once");
    let train = order[..n_train].iter().map(&mut take).collect();
    let test = order[n_train..].iter().map(&mut take).collect();
    Ok(Shard {
        client_id: spec.client_id,
        train,
        test,
    })
}

/// Hold-out set of an unseen object variant: 275 OKAY and 25 HIDDEN images.
pub fn generate_external_testset(seed: u64) -> Vec<LabeledImage> {
    let counts = [EXTERNAL_TOTAL - EXTERNAL_HIDDEN, 0, EXTERNAL_HIDDEN, 0];
    generate_images(
        EXTERNAL_PATTERN,
        DefectSignature::CornerPatch,
        &counts,
        0.05,
        seed ^ crate::rng::mix64(0xE7E7_0000),
    )
}

/// Data for a whole federation: one spec per client plus the external set seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub clients: Vec<ClientDataSpec>,
    pub split_ratio: f64,
    pub external_seed: u64,
}

impl DataSpec {
    /// Default synthetic data for `k` clients (1..=3).
    pub fn default_for(k: usize, seed: u64, split_ratio: f64) -> Result<Self, DataError> {
        if !(1..=3).contains(&k) {
            return Err(DataError::Precondition(format!("default data supports 1..=3 clients, not {k}")));
        }
        let clients = (1..=k as u32)
            .map(|id| ClientDataSpec::default_for(id, seed))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            clients,
            split_ratio,
            external_seed: seed,
        })
    }

    pub fn build(&self) -> Result<(Vec<Shard>, Vec<LabeledImage>), DataError> {
        let shards = self
            .clients
            .iter()
            .map(|c| generate_client_shard(c, self.split_ratio))
            .collect::<Result<_, _>>()?;
        Ok((shards, generate_external_testset(self.external_seed)))
    }
}
