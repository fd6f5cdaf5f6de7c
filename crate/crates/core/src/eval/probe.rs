//! Analytic attribute probes for scene images.
//!
//! The object is located first, from chromaticity contrast against the
//! background, and then excluded from the background fits:
//! - tone: median background chromaticity against the tint chromaticities;
//! - light and texture: one least-squares fit of background log-luminance
//!   on `[1, x, y, stripes, checker, dots]`, where each pattern regressor is
//!   the indicator of that pattern's dark pixels;
//! - colour: median object chromaticity against each colour under the
//!   probed tint.

use nalgebra::{DMatrix, DVector};

use crate::data::scene::{
    base_color, pattern_dark, shape_mask, tint, Color, Light, ProbeCategory, Shape, Texture, Tone, IMAGE_SIZE,
    OBJECT_SIZE, PATTERN_HIGH, PATTERN_LOW, PLACEMENTS,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const N: usize = IMAGE_SIZE;

/// Everything read back from one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeReport {
    pub shape: Shape,
    pub placement: u8,
    pub color: Color,
    pub texture: Texture,
    pub tone: Tone,
    pub light: Light,
}

impl ProbeReport {
    pub fn word(&self, category: ProbeCategory) -> &'static str {
        match category {
            ProbeCategory::Shape => self.shape.word(),
            ProbeCategory::Color => self.color.word(),
            ProbeCategory::Texture => self.texture.word(),
            ProbeCategory::Tone => self.tone.word(),
            ProbeCategory::Light => self.light.word(),
        }
    }
}

pub fn probe_attribute(image: &Tensor, category: ProbeCategory) -> Result<&'static str> {
    Ok(probe_image(image)?.word(category))
}

fn chroma(p: [f64; 3]) -> [f64; 3] {
    let s = (p[0] + p[1] + p[2]).max(1e-6);
    [p[0] / s, p[1] / s, p[2] / s]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn median_chroma(pixels: impl Iterator<Item = [f64; 3]>) -> [f64; 3] {
    let mut ch: [Vec<f64>; 3] = Default::default();
    for p in pixels {
        let c = chroma(p);
        (0..3).for_each(|k| ch[k].push(c[k]));
    }
    if ch[0].is_empty() {
        return [1.0 / 3.0; 3];
    }
    [median(&mut ch[0]), median(&mut ch[1]), median(&mut ch[2])]
}

/// Index of the smallest score; ties keep the earliest.
fn argmin(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in scores.into_iter().enumerate() {
        if s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn object_indicator(shape: Shape, placement: usize) -> Vec<bool> {
    let n = PLACEMENTS.len();
    let (ox, oy) = (PLACEMENTS[placement % n], PLACEMENTS[placement / n]);
    let mask = shape_mask(shape);
    let mut out = vec![false; N * N];
    for y in 0..OBJECT_SIZE {
        for x in 0..OBJECT_SIZE {
            out[(oy + y) * N + ox + x] = mask[y][x];
        }
    }
    out
}

pub fn probe_image(image: &Tensor) -> Result<ProbeReport> {
    if image.shape() != [N, N, 3] {
        return Err(Error::shape("probe", format!("expected [{N}, {N}, 3], got {:?}", image.shape())));
    }
    let px: Vec<[f64; 3]> = image
        .data()
        .chunks_exact(3)
        .map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)])
        .collect();

    // Object: best shape/placement template against chromatic contrast.
    let bg0 = median_chroma(px.iter().copied());
    let objectness: Vec<f64> = px.iter().map(|&p| dist2(chroma(p), bg0).sqrt()).collect();
    let mut best = (Shape::Circle, 0usize, f64::NEG_INFINITY);
    for &shape in Shape::ALL {
        for placement in 0..PLACEMENTS.len() * PLACEMENTS.len() {
            let ind: Vec<f64> = object_indicator(shape, placement)
                .into_iter()
                .map(|b| b as u8 as f64)
                .collect();
            let r = pearson(&objectness, &ind);
            if r > best.2 {
                best = (shape, placement, r);
            }
        }
    }
    let (shape, placement, _) = best;
    let inside = object_indicator(shape, placement);

    let background = || px.iter().zip(&inside).filter(|(_, &o)| !o).map(|(p, _)| *p);
    let bg = median_chroma(background());
    let tone = Tone::ALL[argmin(Tone::ALL.iter().map(|&t| dist2(bg, chroma(tint(t)))))];

    let obj = median_chroma(px.iter().zip(&inside).filter(|(_, &o)| o).map(|(p, _)| *p));
    let tn = tint(tone);
    let color = Color::ALL[argmin(Color::ALL.iter().map(|&c| {
        let b = base_color(c);
        dist2(obj, chroma([b[0] * tn[0], b[1] * tn[1], b[2] * tn[2]]))
    }))];

    let (light, texture) = fit_background(&px, &inside);
    Ok(ProbeReport {
        shape,
        placement: placement as u8,
        color,
        texture,
        tone,
        light,
    })
}

const PATTERNS: [Texture; 3] = [Texture::Stripes, Texture::Checker, Texture::Dots];

fn fit_background(px: &[[f64; 3]], inside: &[bool]) -> (Light, Texture) {
    let rows: Vec<usize> = (0..N * N).filter(|&i| !inside[i]).collect();
    let cols = 3 + PATTERNS.len();
    let mut a = DMatrix::<f64>::zeros(rows.len(), cols);
    let mut b = DVector::<f64>::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let (x, y) = (i % N, i / N);
        a[(r, 0)] = 1.0;
        a[(r, 1)] = x as f64;
        a[(r, 2)] = y as f64;
        for (k, &t) in PATTERNS.iter().enumerate() {
            a[(r, 3 + k)] = pattern_dark(t, x, y).unwrap_or(false) as u8 as f64;
        }
        let p = px[i];
        b[r] = ((p[0] + p[1] + p[2]) / 3.0).max(1e-3).ln();
    }
    let coef = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols));

    let (bx, by) = (coef[1], coef[2]);
    let light = if bx.abs() >= by.abs() {
        if bx > 0.0 {
            Light::Right
        } else {
            Light::Left
        }
    } else if by > 0.0 {
        Light::Bottom
    } else {
        Light::Top
    };

    // A rendered pattern darkens its dark pixels by ln(LOW/HIGH); plain
    // wins unless some pattern reaches half of that.
    let full = (PATTERN_LOW / PATTERN_HIGH).ln();
    let k = argmin((0..PATTERNS.len()).map(|k| coef[3 + k]));
    let texture = if coef[3 + k] < 0.5 * full { PATTERNS[k] } else { Texture::Plain };
    (light, texture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{render_scene, SceneSpec};

    fn plain_spec(tone: Tone, light: Light) -> SceneSpec {
        SceneSpec {
            shape: Shape::Square,
            color: Color::Blue,
            texture: Texture::Plain,
            tone,
            light,
            placement: 0,
        }
    }

    #[test]
    fn red_tint_reads_warm() {
        // Uniform red-dominant image, no object contrast.
        let img = Tensor::from_parts(vec![N, N, 3], [0.8, 0.6, 0.4].repeat(N * N));
        assert_eq!(probe_attribute(&img, ProbeCategory::Tone).unwrap(), "warm");
    }

    #[test]
    fn left_to_right_ramp_reads_right() {
        let mut d = Vec::new();
        for _y in 0..N {
            for x in 0..N {
                let v = 0.2 + 0.6 * x as f64 / (N - 1) as f64;
                d.extend([v, v, v]);
            }
        }
        let img = Tensor::from_parts(vec![N, N, 3], d);
        assert_eq!(probe_attribute(&img, ProbeCategory::Light).unwrap(), "right");
    }

    #[test]
    fn reads_back_a_rendered_scene() {
        let s = SceneSpec {
            shape: Shape::Cross,
            color: Color::Yellow,
            texture: Texture::Dots,
            tone: Tone::Green,
            light: Light::Top,
            placement: 7,
        };
        let r = probe_image(&render_scene(&s, 3)).unwrap();
        assert_eq!(
            (r.shape, r.placement, r.color, r.texture, r.tone, r.light),
            (s.shape, s.placement, s.color, s.texture, s.tone, s.light)
        );
        let p = probe_image(&render_scene(&plain_spec(Tone::Cool, Light::Bottom), 0)).unwrap();
        assert_eq!((p.texture, p.tone, p.light), (Texture::Plain, Tone::Cool, Light::Bottom));
    }

    #[test]
    fn wrong_shape_rejected() {
        assert!(probe_image(&Tensor::zeros(&[8, 8, 3])).is_err());
    }
}
