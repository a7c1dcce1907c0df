//! Random augmentation with a bit-coded record of the sampled transforms.
//!
//! Key layout (10 bits, printed most significant first within each field):
//!
//! | bits  | field                                             |
//! |-------|---------------------------------------------------|
//! | 0..4  | rotation quadrant, one-hot; `0001` is 0..90 deg   |
//! | 4     | horizontal flip                                   |
//! | 5     | vertical flip                                     |
//! | 6..8  | crop-scale bucket over `[0.6, 1.0]`, 2-bit binary |
//! | 8..10 | brightness bucket over `[0.6, 1.4]`, 2-bit binary |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Image, Split};
use crate::error::{ArlError, Result};

pub const KEY_BITS: usize = 10;

pub const SCALE_RANGE: (f64, f64) = (0.6, 1.0);
pub const RATIO_RANGE: (f64, f64) = (0.75, 1.33);
pub const JITTER_RANGE: (f64, f64) = (0.6, 1.4);

/// Sampled transform parameters; replaying them reproduces the output exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    /// Fraction of the image area kept by the crop.
    pub scale: f64,
    /// Crop aspect ratio (width / height).
    pub ratio: f64,
    /// Crop origin as a fraction of the free space, in `[0, 1]^2`.
    pub origin: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
    /// Rotation in degrees, `[0, 360)`.
    pub angle: f64,
    pub brightness: f64,
    pub saturation: f64,
}

impl AugParams {
    pub fn identity() -> AugParams {
        AugParams {
            scale: 1.0,
            ratio: 1.0,
            origin: (0.0, 0.0),
            hflip: false,
            vflip: false,
            angle: 0.0,
            brightness: 1.0,
            saturation: 1.0,
        }
    }

    /// Every parameter uniform over its range; flips are fair coins.
    pub fn sample<R: Rng>(rng: &mut R) -> AugParams {
        AugParams {
            scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            ratio: rng.gen_range(RATIO_RANGE.0..=RATIO_RANGE.1),
            origin: (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)),
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            angle: rng.gen_range(0.0..360.0),
            brightness: rng.gen_range(JITTER_RANGE.0..=JITTER_RANGE.1),
            saturation: rng.gen_range(JITTER_RANGE.0..=JITTER_RANGE.1),
        }
    }

    pub fn quadrant(&self) -> usize {
        ((self.angle.rem_euclid(360.0) / 90.0).floor() as usize).min(3)
    }

    fn bucket(v: f64, range: (f64, f64)) -> usize {
        let t = (v - range.0) / (range.1 - range.0);
        ((t * 4.0).floor().max(0.0) as usize).min(3)
    }

    pub fn bits(&self) -> [u8; KEY_BITS] {
        let mut b = [0u8; KEY_BITS];
        b[3 - self.quadrant()] = 1;
        b[4] = self.hflip as u8;
        b[5] = self.vflip as u8;
        let crop = Self::bucket(self.scale, SCALE_RANGE);
        b[6] = (crop >> 1) as u8;
        b[7] = (crop & 1) as u8;
        let jit = Self::bucket(self.brightness, JITTER_RANGE);
        b[8] = (jit >> 1) as u8;
        b[9] = (jit & 1) as u8;
        b
    }
}

/// Augmentation annotation: transform bits plus the source instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AugmentationKey {
    pub bits: [u8; KEY_BITS],
    pub source: usize,
}

impl AugmentationKey {
    pub fn rotation_bits(&self) -> String {
        self.bits[..4].iter().map(|b| char::from(b'0' + b)).collect()
    }

    pub fn as_attribute(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

impl std::fmt::Display for AugmentationKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, b) in self.bits.iter().enumerate() {
            if matches!(i, 4 | 5 | 6 | 8) {
                f.write_str(" ")?;
            }
            write!(f, "{}", b)?;
        }
        write!(f, " @{}", self.source)
    }
}

#[derive(Clone, Debug)]
pub struct Augmentation {
    pub image: Image,
    pub key: AugmentationKey,
    pub params: AugParams,
}

fn bilinear(im: &Image, c: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (im.height - 1) as f64);
    let x = x.clamp(0.0, (im.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(im.height - 1), (x0 + 1).min(im.width - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    if fy == 0.0 && fx == 0.0 {
        return im.at(c, y0, x0);
    }
    let top = im.at(c, y0, x0) * (1.0 - fx) + im.at(c, y0, x1) * fx;
    let bot = im.at(c, y1, x0) * (1.0 - fx) + im.at(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn resized_crop(im: &Image, p: &AugParams) -> Image {
    let (h, w) = (im.height as f64, im.width as f64);
    let cw = ((p.scale * p.ratio).sqrt() * w).min(w);
    let ch = ((p.scale / p.ratio).sqrt() * h).min(h);
    let x0 = p.origin.0 * (w - cw);
    let y0 = p.origin.1 * (h - ch);
    let mut out = Image::zeros(im.channels, im.height, im.width);
    for y in 0..im.height {
        let sy = y0 + (y as f64 + 0.5) * ch / h - 0.5;
        for x in 0..im.width {
            let sx = x0 + (x as f64 + 0.5) * cw / w - 0.5;
            for c in 0..im.channels {
                out.set(c, y, x, bilinear(im, c, sy, sx));
            }
        }
    }
    out
}

fn flip(im: &Image, h: bool, v: bool) -> Image {
    if !h && !v {
        return im.clone();
    }
    let mut out = Image::zeros(im.channels, im.height, im.width);
    for c in 0..im.channels {
        for y in 0..im.height {
            let sy = if v { im.height - 1 - y } else { y };
            for x in 0..im.width {
                let sx = if h { im.width - 1 - x } else { x };
                out.set(c, y, x, im.at(c, sy, sx));
            }
        }
    }
    out
}

/// Nearest-neighbour rotation about the centre with zero padding.
fn rotate(im: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return im.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (im.height as f64 - 1.0) / 2.0;
    let cx = (im.width as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(im.channels, im.height, im.width);
    for y in 0..im.height {
        for x in 0..im.width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cos * dx + sin * dy + cx).round();
            let sy = (-sin * dx + cos * dy + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= im.width as f64 || sy >= im.height as f64 {
                continue;
            }
            for c in 0..im.channels {
                out.set(c, y, x, im.at(c, sy as usize, sx as usize));
            }
        }
    }
    out
}

fn jitter(im: &mut Image, brightness: f64, saturation: f64) {
    let plane = im.height * im.width;
    let (b, s) = (brightness as f32, saturation as f32);
    for k in 0..plane {
        let gray = if im.channels == 3 {
            0.299 * im.data[k] + 0.587 * im.data[plane + k] + 0.114 * im.data[2 * plane + k]
        } else {
            im.data[k]
        };
        for c in 0..im.channels {
            let v = im.data[c * plane + k];
            let v = if b == 1.0 && s == 1.0 { v } else { (gray + s * (v - gray)) * b };
            im.data[c * plane + k] = v.clamp(0.0, 1.0);
        }
    }
}

/// Crop, flips, rotation, then colour jitter, with the given parameters.
pub fn augment_with(image: &Image, params: &AugParams, source: usize) -> Augmentation {
    let cropped = resized_crop(image, params);
    let flipped = flip(&cropped, params.hflip, params.vflip);
    let mut out = rotate(&flipped, params.angle);
    jitter(&mut out, params.brightness, params.saturation);
    Augmentation {
        image: out,
        key: AugmentationKey {
            bits: params.bits(),
            source,
        },
        params: *params,
    }
}

pub fn augment<R: Rng>(image: &Image, source: usize, rng: &mut R) -> Augmentation {
    let params = AugParams::sample(rng);
    augment_with(image, &params, source)
}

/// Images of one split addressed by instance id only; labels are not reachable.
pub struct UnlabeledPool<'a> {
    items: Vec<(usize, &'a Image)>,
}

impl<'a> UnlabeledPool<'a> {
    pub fn from_split(ds: &'a Dataset, split: Split) -> Self {
        UnlabeledPool {
            items: ds.split_instances(split).into_iter().map(|i| (i, ds.image(i))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `M` augmentations of one source image.
#[derive(Clone, Debug)]
pub struct AugSet {
    pub images: Vec<Image>,
    pub keys: Vec<AugmentationKey>,
}

/// Augmentations of two distinct source images X and Y.
#[derive(Clone, Debug)]
pub struct UnsupPair {
    pub x: AugSet,
    pub y: AugSet,
}

/// A batch for contrastive training. Carries no class information.
#[derive(Clone, Debug)]
pub struct UnsupBatch {
    pub pairs: Vec<UnsupPair>,
    pub m: usize,
}

impl UnsupBatch {
    pub fn num_images(&self) -> usize {
        self.pairs.len() * 2 * self.m
    }
}

pub fn sample_unsup_batch(pool: &UnlabeledPool<'_>, n_pairs: usize, m: usize, seed: u64) -> Result<UnsupBatch> {
    if m < 2 {
        return Err(ArlError::Contract(format!(
            "M = {} augmentations per source; contrastive pairs need M >= 2",
            m
        )));
    }
    if pool.len() < 2 {
        return Err(ArlError::Capacity(format!(
            "unsupervised batches need >= 2 instances, pool has {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let picks = rand::seq::index::sample(&mut rng, pool.len(), 2);
        let mut make = |which: usize| {
            let (source, im) = pool.items[picks.index(which)];
            let augs: Vec<Augmentation> = (0..m).map(|_| augment(im, source, &mut rng)).collect();
            AugSet {
                keys: augs.iter().map(|a| a.key).collect(),
                images: augs.into_iter().map(|a| a.image).collect(),
            }
        };
        let x = make(0);
        let y = make(1);
        pairs.push(UnsupPair { x, y });
    }
    Ok(UnsupBatch { pairs, m })
}
