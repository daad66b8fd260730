use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }
}

fn dims(img: &Tensor) -> (usize, usize, usize) {
    let s = img.shape();
    let r = s.len();
    (s[..r - 2].iter().product(), s[r - 2], s[r - 1])
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (planes, h, w) = dims(img);
    let mut out = img.clone();
    for p in 0..planes * h {
        let row = &mut out.data_mut()[p * w..(p + 1) * w];
        row.reverse();
    }
    debug_assert_eq!(out.len(), planes * h * w);
    out
}

/// Mirrors with probability 0.5. Returns whether it flipped.
pub fn random_flip<R: Rng + ?Sized>(img: &Tensor, rng: &mut R) -> (Tensor, bool) {
    if rng.random_bool(0.5) {
        (flip_horizontal(img), true)
    } else {
        (img.clone(), false)
    }
}

/// Zero-pads every side by `padding` and crops a random window of the
/// original size.
pub fn random_crop<R: Rng + ?Sized>(img: &Tensor, padding: usize, rng: &mut R) -> Tensor {
    if padding == 0 {
        return img.clone();
    }
    let (planes, h, w) = dims(img);
    let oy = rng.random_range(0..=2 * padding) as isize - padding as isize;
    let ox = rng.random_range(0..=2 * padding) as isize - padding as isize;
    let mut out = Tensor::zeros(img.shape());
    let src = img.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..h {
            let sy = y as isize + oy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + ox;
                if sx >= 0 && sx < w as isize {
                    dst[(p * h + y) * w + x] = src[(p * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Draws a rectangle whose area fraction lies in `area` and whose
/// height/width ratio lies in `aspect`. Candidates that do not fit, or whose
/// rounded area leaves the bounds, are rejected; `None` after `attempts`.
fn sample_rect<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    area: (f64, f64),
    aspect: (f64, f64),
    attempts: usize,
    rng: &mut R,
) -> Option<Rect> {
    let total = (h * w) as f64;
    for _ in 0..attempts {
        let target = rng.random_range(area.0..=area.1) * total;
        let ratio = rng.random_range(aspect.0..=aspect.1);
        let rh = libm::round(libm::sqrt(target * ratio)) as usize;
        let rw = libm::round(libm::sqrt(target / ratio)) as usize;
        if rh == 0 || rw == 0 || rh > h || rw > w {
            continue;
        }
        let frac = (rh * rw) as f64 / total;
        if frac < area.0 || frac > area.1 {
            continue;
        }
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        return Some(Rect { top, left, height: rh, width: rw });
    }
    None
}

/// Overwrites one random rectangle with uniform noise.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RandomErasing {
    pub probability: f64,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
    pub attempts: usize,
}

impl Default for RandomErasing {
    fn default() -> Self {
        RandomErasing { probability: 0.5, area: (0.02, 0.4), aspect: (0.3, 3.3), attempts: 100 }
    }
}

impl RandomErasing {
    pub fn apply<R: Rng + ?Sized>(&self, img: &Tensor, rng: &mut R) -> (Tensor, Option<Rect>) {
        if !rng.random_bool(self.probability.clamp(0.0, 1.0)) {
            return (img.clone(), None);
        }
        let (planes, h, w) = dims(img);
        let Some(rect) = sample_rect(h, w, self.area, self.aspect, self.attempts, rng) else {
            return (img.clone(), None);
        };
        let mut out = img.clone();
        let d = out.data_mut();
        for p in 0..planes {
            for y in rect.top..rect.top + rect.height {
                for x in rect.left..rect.left + rect.width {
                    d[(p * h + y) * w + x] = rng.random();
                }
            }
        }
        (out, Some(rect))
    }
}

/// Bounded FIFO of patches cut from earlier images.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPool {
    capacity: usize,
    patches: VecDeque<Tensor>,
}

impl PatchPool {
    pub fn new(capacity: usize) -> Self {
        PatchPool { capacity, patches: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn push(&mut self, patch: Tensor) {
        if self.capacity == 0 {
            return;
        }
        if self.patches.len() == self.capacity {
            self.patches.pop_front();
        }
        self.patches.push_back(patch);
    }
}

/// Pastes a pooled patch at a random position, then stores a freshly cut
/// patch of the current image in the pool.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RandomPatch {
    pub pool_capacity: usize,
    pub paste_probability: f64,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
    pub attempts: usize,
}

impl Default for RandomPatch {
    fn default() -> Self {
        RandomPatch { pool_capacity: 50, paste_probability: 0.5, area: (0.01, 0.5), aspect: (0.1, 10.0), attempts: 100 }
    }
}

impl RandomPatch {
    pub fn apply<R: Rng + ?Sized>(&self, img: &Tensor, rng: &mut R, pool: &mut PatchPool) -> (Tensor, Option<Rect>) {
        let (planes, h, w) = dims(img);
        let mut out = img.clone();
        let mut pasted = None;
        if !pool.is_empty() && rng.random_bool(self.paste_probability.clamp(0.0, 1.0)) {
            let patch = &pool.patches[rng.random_range(0..pool.len())];
            let (pp, src_h, src_w) = dims(patch);
            let (ph, pw) = (src_h.min(h), src_w.min(w));
            let top = rng.random_range(0..=h - ph);
            let left = rng.random_range(0..=w - pw);
            let d = out.data_mut();
            for p in 0..planes.min(pp) {
                for y in 0..ph {
                    let src = (p * src_h + y) * src_w;
                    let dst = (p * h + top + y) * w + left;
                    d[dst..dst + pw].copy_from_slice(&patch.data()[src..src + pw]);
                }
            }
            pasted = Some(Rect { top, left, height: ph, width: pw });
        }
        if let Some(r) = sample_rect(h, w, self.area, self.aspect, self.attempts, rng) {
            pool.push(crop(img, r));
        }
        (out, pasted)
    }
}

fn crop(img: &Tensor, r: Rect) -> Tensor {
    let (planes, h, w) = dims(img);
    let mut data = Vec::with_capacity(planes * r.area());
    for p in 0..planes {
        for y in r.top..r.top + r.height {
            let start = (p * h + y) * w + r.left;
            data.extend_from_slice(&img.data()[start..start + r.width]);
        }
    }
    Tensor { shape: alloc::vec![planes, r.height, r.width], data }
}

/// Which augmentations the trainer applies, in order: flip, crop, patch,
/// erasing.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop_padding: usize,
    pub erasing: Option<RandomErasing>,
    pub patch: Option<RandomPatch>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip: true, crop_padding: 4, erasing: None, patch: None }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { flip: false, crop_padding: 0, erasing: None, patch: None }
    }
}

/// Stateful augmentation pipeline (the patch pool persists across images).
#[derive(Clone, Debug)]
pub struct Augmenter {
    pub config: AugmentConfig,
    pool: PatchPool,
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Self {
        let cap = config.patch.as_ref().map_or(0, |p| p.pool_capacity);
        Augmenter { config, pool: PatchPool::new(cap) }
    }

    pub fn apply<R: Rng + ?Sized>(&mut self, img: &Tensor, rng: &mut R) -> Tensor {
        let mut out = if self.config.flip { random_flip(img, rng).0 } else { img.clone() };
        out = random_crop(&out, self.config.crop_padding, rng);
        if let Some(p) = &self.config.patch {
            out = p.apply(&out, rng, &mut self.pool).0;
        }
        if let Some(e) = &self.config.erasing {
            out = e.apply(&out, rng).0;
        }
        out
    }
}
