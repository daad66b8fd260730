use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, Result};
use crate::rng::{derive, standard_normal, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// One rendered image with its labels. `image` is `3 × H × W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonImage {
    pub image: Tensor,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
}

/// Per-camera colour transform `a·p + b + noise·N(0, 1)`, applied per channel.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StyleProfile {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
    #[cfg_attr(feature = "serde", serde(default))]
    pub noise: f64,
}

impl Default for StyleProfile {
    fn default() -> Self {
        StyleProfile { scale: [1.0; 3], shift: [0.0; 3], noise: 0.0 }
    }
}

impl StyleProfile {
    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&a| !(a > 0.0) || !a.is_finite()) || self.shift.iter().any(|b| !b.is_finite()) {
            return Err(config_err!("style scale must be positive and shifts finite: {:?}", self));
        }
        if !(self.noise >= 0.0) {
            return Err(config_err!("style noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }

    /// Pure per-channel affine, without noise or clamping. Works on any
    /// `N × 3 × H × W` or `3 × H × W` tensor.
    pub fn apply_affine(&self, image: &Tensor) -> Tensor {
        let mut out = image.clone();
        let shape = image.shape();
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *v = self.scale[c] * *v + self.shift[c];
        }
        out
    }

    /// Affine, then additive noise, then clamping to `[0, 1]`.
    pub fn apply<R: Rng + ?Sized>(&self, image: &Tensor, rng: &mut R) -> Tensor {
        let mut out = self.apply_affine(image);
        for v in out.data_mut() {
            if self.noise > 0.0 {
                *v += self.noise * standard_normal(rng);
            }
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// Generator settings. Train and test identities are disjoint; image `j` of
/// an identity is seen by camera `j mod cameras`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub train_ids: usize,
    pub test_ids: usize,
    pub images_per_id: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    /// Per-image pixel noise before the camera style.
    pub pixel_noise: f64,
    /// One profile per camera; empty means no style.
    pub styles: Vec<StyleProfile>,
    /// When non-empty, test identities are seen by a separate set of cameras
    /// (numbered after the training cameras) with these styles.
    pub test_styles: Vec<StyleProfile>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_ids: 32,
            test_ids: 16,
            images_per_id: 20,
            cameras: 4,
            height: 64,
            width: 32,
            pixel_noise: 0.03,
            styles: Vec::new(),
            test_styles: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_ids + self.test_ids < 2 {
            return Err(config_err!("need at least 2 identities, got {}", self.train_ids + self.test_ids));
        }
        if self.cameras < 2 {
            return Err(config_err!("need at least 2 cameras, got {}", self.cameras));
        }
        if self.images_per_id < 2 {
            return Err(config_err!("need at least 2 images per identity, got {}", self.images_per_id));
        }
        if self.height < 8 || self.width < 4 {
            return Err(config_err!("image size {}x{} is too small", self.height, self.width));
        }
        if !self.styles.is_empty() && self.styles.len() != self.cameras {
            return Err(config_err!("{} styles for {} cameras", self.styles.len(), self.cameras));
        }
        if self.test_styles.len() == 1 {
            return Err(config_err!("test cameras need at least 2 styles"));
        }
        if !(self.pixel_noise >= 0.0) {
            return Err(config_err!("pixel noise must be non-negative"));
        }
        self.styles.iter().chain(&self.test_styles).try_for_each(StyleProfile::validate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub train: Vec<PersonImage>,
    pub query: Vec<PersonImage>,
    pub gallery: Vec<PersonImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PersonImage] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }
}

/// Stacks `3 × H × W` images into one `N × 3 × H × W` batch.
pub fn stack_images(images: &[PersonImage]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = images.iter().map(|p| &p.image).collect();
    Tensor::stack(&refs)
}

/// Identity-level appearance: a global silhouette colouring plus a small
/// motif whose shape, placement and colour are identity-specific.
#[derive(Clone, Debug, PartialEq)]
struct Appearance {
    upper: [f64; 3],
    lower: [f64; 3],
    skin: [f64; 3],
    motif: [f64; 3],
    motif_kind: u8,
    motif_u: f64,
    motif_v: f64,
}

impl Appearance {
    fn sample(rng: &mut SeededRng) -> Self {
        let mut colour = |lo: f64, hi: f64| -> [f64; 3] { core::array::from_fn(|_| rng.random_range(lo..hi)) };
        let upper = colour(0.05, 0.95);
        let lower = colour(0.05, 0.95);
        let skin = colour(0.55, 0.85);
        let motif = colour(0.0, 1.0);
        Appearance {
            upper,
            lower,
            skin,
            motif,
            motif_kind: rng.random_range(0..4),
            motif_u: rng.random_range(0.38..0.62),
            motif_v: rng.random_range(0.30..0.46),
        }
    }
}

/// Per-image nuisance: translation, body width and background.
#[derive(Clone, Debug, PartialEq)]
struct Pose {
    du: f64,
    dv: f64,
    width: f64,
    background: [f64; 3],
}

impl Pose {
    fn sample(rng: &mut SeededRng) -> Self {
        let grey = rng.random_range(0.3..0.7);
        Pose {
            du: rng.random_range(-0.08..0.08),
            dv: rng.random_range(-0.04..0.04),
            width: rng.random_range(0.9..1.1),
            background: core::array::from_fn(|_| grey + rng.random_range(-0.05..0.05)),
        }
    }
}

fn motif_hit(kind: u8, du: f64, dv: f64, half: f64) -> bool {
    let (a, b) = (du.abs() / half, dv.abs() / half);
    if a > 1.0 || b > 1.0 {
        return false;
    }
    match kind {
        0 => true,
        1 => a < 0.35 || b < 0.35,
        2 => (du / half - dv / half).abs() < 0.5,
        _ => a > 0.55 || b > 0.55,
    }
}

fn render(app: &Appearance, pose: &Pose, h: usize, w: usize) -> Tensor {
    let mut data = alloc::vec![0.0; 3 * h * w];
    let half_v = 0.06;
    let aspect = h as f64 / w as f64;
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 - pose.du;
            let v = (y as f64 + 0.5) / h as f64 - pose.dv;
            let cu = (u - 0.5).abs() / pose.width;
            let (hu, hv) = ((u - 0.5) / 0.12, (v - 0.12) / 0.08);
            let head = hu * hu + hv * hv <= 1.0;
            let torso = cu < 0.22 && (0.22..0.55).contains(&v);
            let arms = (0.22..0.30).contains(&cu) && (0.24..0.50).contains(&v);
            let legs = (0.03..0.18).contains(&cu) && (0.55..0.95).contains(&v);
            let motif = torso && motif_hit(app.motif_kind, (u - app.motif_u) / aspect, v - app.motif_v, half_v);
            let rgb = if motif {
                app.motif
            } else if torso {
                app.upper
            } else if arms {
                app.upper.map(|c| 0.8 * c)
            } else if legs {
                app.lower
            } else if head {
                app.skin
            } else {
                pose.background
            };
            for c in 0..3 {
                data[(c * h + y) * w + x] = rgb[c];
            }
        }
    }
    Tensor { shape: alloc::vec![3, h, w], data }
}

const APPEARANCE_STREAM: u64 = 1 << 40;
const IMAGE_STREAM: u64 = 1 << 41;

fn render_image(cfg: &SynthConfig, identity: usize, index: usize, style: Option<&StyleProfile>) -> Tensor {
    let app = Appearance::sample(&mut derive(cfg.seed, APPEARANCE_STREAM + identity as u64));
    let rng = &mut derive(cfg.seed, IMAGE_STREAM + ((identity as u64) << 20) + index as u64);
    let pose = Pose::sample(rng);
    let mut img = render(&app, &pose, cfg.height, cfg.width);
    for v in img.data_mut() {
        *v = (*v + cfg.pixel_noise * standard_normal(rng)).clamp(0.0, 1.0);
    }
    match style {
        Some(s) => s.apply(&img, rng),
        None => img,
    }
}

/// Renders the whole dataset. Output depends only on the config (and its
/// seed). For every test identity the first image from each camera goes to
/// the query split and the rest to the gallery.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let separate_test = !cfg.test_styles.is_empty();
    for identity in 0..cfg.train_ids + cfg.test_ids {
        let is_train = identity < cfg.train_ids;
        let (cameras, offset, styles) = if !is_train && separate_test {
            (cfg.test_styles.len(), cfg.cameras, &cfg.test_styles)
        } else {
            (cfg.cameras, 0, &cfg.styles)
        };
        for index in 0..cfg.images_per_id {
            let local = index % cameras;
            let image = render_image(cfg, identity, index, styles.get(local));
            let camera = offset + local;
            let split = if is_train {
                Split::Train
            } else if index < cameras {
                Split::Query
            } else {
                Split::Gallery
            };
            let item = PersonImage { image, identity, camera, split };
            match split {
                Split::Train => train.push(item),
                Split::Query => query.push(item),
                Split::Gallery => gallery.push(item),
            }
        }
    }
    Ok(Dataset { config: cfg.clone(), train, query, gallery })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small() -> SynthConfig {
        SynthConfig { train_ids: 4, test_ids: 3, images_per_id: 6, cameras: 2, height: 32, width: 16, ..Default::default() }
    }

    #[test]
    fn deterministic_per_identity_pose_camera_seed() {
        let cfg = small();
        assert_eq!(render_image(&cfg, 3, 2, None), render_image(&cfg, 3, 2, None));
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(render_image(&cfg, 3, 2, None), render_image(&other, 3, 2, None));
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn motif_alone_changes_pixels() {
        let mut rng = seeded(4);
        let a = Appearance::sample(&mut rng);
        let pose = Pose::sample(&mut rng);
        let mut b = a.clone();
        b.motif_kind = (a.motif_kind + 1) % 4;
        b.motif_u = a.motif_u + 0.05;
        let (x, y) = (render(&a, &pose, 64, 32), render(&b, &pose, 64, 32));
        let changed = x.data().iter().zip(y.data()).filter(|(p, q)| p != q).count();
        assert!(changed > 0);
        assert!(changed < x.len() / 10, "motif must stay local, {changed} pixels changed");
    }

    #[test]
    fn splits_follow_protocol() {
        let d = generate_dataset(&small()).unwrap();
        assert_eq!(d.train.len(), 4 * 6);
        assert_eq!(d.query.len(), 3 * 2);
        assert_eq!(d.gallery.len(), 3 * 4);
        assert!(d.train.iter().all(|p| p.identity < 4));
        assert!(d.query.iter().chain(&d.gallery).all(|p| p.identity >= 4));
        for q in &d.query {
            assert!(d.gallery.iter().any(|g| g.identity == q.identity && g.camera != q.camera));
        }
        for p in d.train.iter().chain(&d.query).chain(&d.gallery) {
            assert_eq!(p.image.shape(), [3, 32, 16]);
            assert!(p.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn separate_test_cameras_are_renumbered() {
        let cfg = SynthConfig {
            test_styles: alloc::vec![StyleProfile::default(); 3],
            images_per_id: 6,
            ..small()
        };
        let d = generate_dataset(&cfg).unwrap();
        assert!(d.train.iter().all(|p| p.camera < 2));
        assert!(d.query.iter().chain(&d.gallery).all(|p| (2..5).contains(&p.camera)));
        assert_eq!(d.query.len(), 3 * 3);
    }

    #[test]
    fn within_identity_variance_below_between_identity_variance() {
        let cfg = SynthConfig { train_ids: 12, test_ids: 0, images_per_id: 8, ..small() };
        let d = generate_dataset(&cfg).unwrap();
        let len = d.train[0].image.len();
        let mut means = Vec::new();
        let mut within = 0.0;
        for id in 0..cfg.train_ids {
            let imgs: Vec<&Tensor> = d.train.iter().filter(|p| p.identity == id).map(|p| &p.image).collect();
            let mean: Vec<f64> =
                (0..len).map(|j| imgs.iter().map(|t| t.data()[j]).sum::<f64>() / imgs.len() as f64).collect();
            for t in &imgs {
                within += t.data().iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>();
            }
            means.push(mean);
        }
        within /= (cfg.train_ids * cfg.images_per_id * len) as f64;
        let grand: Vec<f64> = (0..len).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / means.len() as f64).collect();
        let between = means
            .iter()
            .map(|m| m.iter().zip(&grand).map(|(a, g)| (a - g).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (cfg.train_ids * len) as f64;
        assert!(within < between, "within {within} vs between {between}");
    }

    #[test]
    fn affine_style_is_per_channel() {
        let s = StyleProfile { scale: [2.0, 1.0, 0.5], shift: [0.1, 0.0, -0.1], noise: 0.0 };
        let img = Tensor::full(&[3, 2, 2], 0.4);
        let out = s.apply_affine(&img);
        assert!((out.data()[0] - 0.9).abs() < 1e-12);
        assert!((out.data()[4] - 0.4).abs() < 1e-12);
        assert!((out.data()[8] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(generate_dataset(&SynthConfig { cameras: 1, ..small() }).is_err());
        assert!(generate_dataset(&SynthConfig { train_ids: 1, test_ids: 0, ..small() }).is_err());
        assert!(generate_dataset(&SynthConfig { styles: alloc::vec![StyleProfile::default()], ..small() }).is_err());
        let bad = StyleProfile { scale: [0.0, 1.0, 1.0], ..Default::default() };
        assert!(generate_dataset(&SynthConfig { styles: alloc::vec![bad; 2], ..small() }).is_err());
    }
}
