use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{BinaryMask, FeatureError, FeatureProvider, FeatureVector, ProviderInfo};

const HUE_BINS: usize = 12;
const NATIVE_BINS: usize = HUE_BINS + 4;
const FLOOD_TOLERANCE: i32 = 8;

/// Deterministic stand-in for a vision-language model.
///
/// Images embed as a coarse HSV histogram: twelve 30° hue bins centred on
/// red, green, ... for saturated pixels, plus four brightness bins for
/// achromatic ones. Pure white (the crop background) is ignored. Color words
/// embed onto the matching bins, so `"red"` scores high against red crops.
/// Other text hashes to a pseudo-random unit vector. Segmentation flood-fills
/// near-uniform color from the prompts that agree with the majority.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    info: ProviderInfo,
}

impl SyntheticProvider {
    pub fn new(name: &str, dim: usize) -> Result<Self, FeatureError> {
        if dim < 8 {
            return Err(FeatureError::InvalidArgument(format!("synthetic provider needs dim >= 8, got {dim}")));
        }
        Ok(Self {
            info: ProviderInfo {
                name: name.to_owned(),
                dim,
                image_model: "synthetic-hsv-histogram".into(),
                text_model: "synthetic-color-words".into(),
            },
        })
    }

    fn fold(&self, native: &[f64; NATIVE_BINS]) -> Vec<f64> {
        let mut out = vec![0.0; self.info.dim];
        let d = self.info.dim;
        for (i, v) in native.iter().enumerate() {
            // below 16 dims neighboring bins share a slot
            out[if d >= NATIVE_BINS { i } else { i * d / NATIVE_BINS }] += v;
        }
        out
    }
}

fn hsv(p: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = p.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, s, max)
}

fn native_bin(p: [u8; 3]) -> Option<usize> {
    if p == [255, 255, 255] {
        return None;
    }
    let (h, s, v) = hsv(p);
    if s >= 0.25 && v >= 0.2 {
        Some((((h + 15.0).rem_euclid(360.0)) / 30.0) as usize % HUE_BINS)
    } else {
        Some(HUE_BINS + ((v * 4.0) as usize).min(3))
    }
}

fn word_bins(word: &str) -> Option<&'static [usize]> {
    Some(match word {
        "red" => &[0],
        "orange" => &[1],
        "yellow" => &[2],
        "green" => &[4],
        "cyan" | "teal" => &[6],
        "blue" => &[8],
        "purple" | "violet" => &[9],
        "magenta" => &[10],
        "pink" => &[11],
        "black" => &[12],
        "gray" | "grey" => &[13, 14],
        "white" => &[15],
        _ => return None,
    })
}

fn hashed_unit(text: &str, dim: usize) -> Result<FeatureVector, FeatureError> {
    let digest = Sha256::digest(text.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    FeatureVector::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

impl FeatureProvider for SyntheticProvider {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn embed_image(&self, image: &RgbImage) -> Result<FeatureVector, FeatureError> {
        let mut hist = [0.0; NATIVE_BINS];
        for p in image.pixels() {
            if let Some(b) = native_bin(p.0) {
                hist[b] += 1.0;
            }
        }
        if hist.iter().all(|&c| c == 0.0) {
            hist[NATIVE_BINS - 1] = 1.0;
        }
        FeatureVector::new(self.fold(&hist))
    }

    fn embed_text(&self, text: &str) -> Result<FeatureVector, FeatureError> {
        if text.trim().is_empty() {
            return Err(FeatureError::InvalidArgument("empty text".into()));
        }
        let lower = text.to_lowercase();
        let mut hist = [0.0; NATIVE_BINS];
        let mut known = false;
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            if let Some(bins) = word_bins(word) {
                known = true;
                for &b in bins {
                    hist[b] += 1.0 / bins.len() as f64;
                }
            }
        }
        if known {
            FeatureVector::new(self.fold(&hist))
        } else {
            hashed_unit(text, self.info.dim)
        }
    }

    fn segment(&self, image: &RgbImage, prompts: &[[f64; 2]]) -> Result<BinaryMask, FeatureError> {
        let (w, h) = image.dimensions();
        let mut mask = BinaryMask::new(w, h);
        if w == 0 || h == 0 {
            return Ok(mask);
        }
        // Jointly prompted segmenters favour the object most prompts agree
        // on: only prompts in the largest group of matching seed colors fill.
        let seeds: Vec<(u32, u32)> = prompts.iter().map(|&p| crate::visibility::nearest_pixel(p, w, h)).collect();
        let color = |(x, y): (u32, u32)| image.get_pixel(x, y).0.map(i32::from);
        let close = |a: [i32; 3], b: [i32; 3]| (0..3).all(|c| (a[c] - b[c]).abs() <= FLOOD_TOLERANCE);
        let support = |s: &(u32, u32)| seeds.iter().filter(|t| close(color(*s), color(**t))).count();
        let Some(best) = seeds.iter().map(support).max() else {
            return Ok(mask);
        };
        let leader = color(*seeds.iter().find(|s| support(s) == best).expect("max exists"));
        for &(sx, sy) in seeds.iter().filter(|s| close(color(**s), leader)) {
            if mask.get(sx, sy) {
                continue;
            }
            let seed = color((sx, sy));
            let mut stack = vec![(sx, sy)];
            mask.set(sx, sy, true);
            while let Some((x, y)) = stack.pop() {
                let mut visit = |nx: u32, ny: u32| {
                    if !mask.get(nx, ny) && close(color((nx, ny)), seed) {
                        mask.set(nx, ny, true);
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn solid(c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(8, 8, Rgb(c))
    }

    fn cos(p: &SyntheticProvider, text: &str, c: [u8; 3]) -> f64 {
        p.embed_text(text).unwrap().dot(&p.embed_image(&solid(c)).unwrap()).unwrap()
    }

    #[test]
    fn color_words_match_solid_images() {
        for dim in [8, 16, 64] {
            let p = SyntheticProvider::new("s", dim).unwrap();
            assert!(cos(&p, "red", [255, 0, 0]) >= 0.99);
            assert!(cos(&p, "a red box", [200, 30, 30]) >= 0.99);
            assert!(cos(&p, "green", [30, 170, 40]) >= 0.99);
            assert!(cos(&p, "blue", [40, 60, 200]) >= 0.99);
            assert!(cos(&p, "red", [0, 0, 255]) <= 0.2, "dim {dim}");
        }
    }

    #[test]
    fn unknown_words_are_stable_unit_vectors() {
        let p = SyntheticProvider::new("s", 32).unwrap();
        let a = p.embed_text("chair").unwrap();
        assert_eq!(a, p.embed_text("chair").unwrap());
        assert_ne!(a, p.embed_text("table").unwrap());
        assert!((a.dot(&a).unwrap() - 1.0).abs() < 1e-12);
        assert!(SyntheticProvider::new("s", 4).is_err());
    }

    #[test]
    fn segment_two_color_image() {
        let img = RgbImage::from_fn(20, 10, |x, _| if x < 12 { Rgb([200, 30, 30]) } else { Rgb([30, 30, 200]) });
        let p = SyntheticProvider::new("s", 16).unwrap();
        let m = p.segment(&img, &[[3.2, 4.6]]).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                assert_eq!(m.get(x, y), x < 12);
            }
        }
        let outvoted = p.segment(&img, &[[15.0, 1.0], [1.0, 1.0], [2.0, 8.0]]).unwrap();
        assert_eq!(outvoted, m);
        let two_regions = RgbImage::from_fn(20, 10, |x, _| if x % 10 < 5 { Rgb([200, 30, 30]) } else { Rgb([30, 30, 200]) });
        let union = p.segment(&two_regions, &[[1.0, 1.0], [11.0, 1.0]]).unwrap();
        assert_eq!(union.count(), 100);
    }
}
