use nalgebra::Vector2;

use super::{BBox, Detection, DetectorParams};
use crate::events::EventFrame;

/// Binary mask over a rectangular window of a frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Thresholds `frame` at `threshold`, cropped to the bounding box of the
/// foreground. Returns `None` for an empty frame.
pub fn binarize(frame: &EventFrame, threshold: u32) -> Option<Mask> {
    let (w, h) = (frame.width(), frame.height());
    let counts = frame.counts();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        let row = &counts[y * w..(y + 1) * w];
        for (x, &c) in row.iter().enumerate() {
            if c >= threshold {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let (mw, mh) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut bits = vec![false; mw * mh];
    for y in 0..mh {
        for x in 0..mw {
            bits[y * mw + x] = counts[(y + y0) * w + x + x0] >= threshold;
        }
    }
    Some(Mask {
        x0,
        y0,
        width: mw,
        height: mh,
        bits,
    })
}

/// Erosion by a `(2r+1)`-square structuring element; outside the mask is
/// background.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let span = 2 * radius + 1;
    // horizontal pass: run length of consecutive foreground ending at x
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        let mut run = 0usize;
        let row = &mask.bits[y * w..(y + 1) * w];
        for x in 0..w {
            run = if row[x] { run + 1 } else { 0 };
            // window [x - 2r, x] fully set -> centre x - r survives
            if run >= span {
                horiz[y * w + x - radius] = true;
            }
        }
    }
    let mut out = vec![false; w * h];
    for x in 0..w {
        let mut run = 0usize;
        for y in 0..h {
            run = if horiz[y * w + x] { run + 1 } else { 0 };
            if run >= span {
                out[(y - radius) * w + x] = true;
            }
        }
    }
    Mask {
        bits: out,
        ..*mask
    }
}

/// 8-connected labelling. Returns per-pixel labels (0 = background) and
/// the pixel count of each label (index 0 unused). Labels follow raster
/// order of each component's first pixel.
pub fn label_components(mask: &Mask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut areas = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32;
        let mut area = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Connected-component detector: binarise, erode, label, drop small
/// components, then restore each surviving component to the pre-erosion
/// pixels inside its dilated footprint.
///
/// A pre-erosion pixel reachable from several components goes to the
/// nearest eroded pixel (smallest label on ties).
pub fn detect_cc(frame: &EventFrame, params: &DetectorParams) -> Vec<Detection> {
    let Some(mask) = binarize(frame, params.binarize_threshold) else {
        return Vec::new();
    };
    let r = params.erosion_radius;
    let eroded = erode(&mask, r);
    let (labels, areas) = label_components(&eroded);
    let keep: Vec<bool> = areas.iter().enumerate().map(|(l, &a)| l > 0 && a >= params.min_area).collect();
    if !keep.iter().any(|&k| k) {
        return Vec::new();
    }

    struct Acc {
        sx: f64,
        sy: f64,
        n: usize,
        bbox: Option<BBox>,
    }
    let mut acc: Vec<Acc> = (0..areas.len())
        .map(|_| Acc {
            sx: 0.0,
            sy: 0.0,
            n: 0,
            bbox: None,
        })
        .collect();

    let (w, h) = (mask.width as i64, mask.height as i64);
    let ri = r as i64;
    for y in 0..h {
        for x in 0..w {
            if !mask.bits[(y * w + x) as usize] {
                continue;
            }
            let mut best: Option<(i64, u32)> = None;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let l = labels[(ny * w + nx) as usize];
                    if l == 0 || !keep[l as usize] {
                        continue;
                    }
                    let d = dx * dx + dy * dy;
                    if best.is_none_or(|(bd, bl)| d < bd || (d == bd && l < bl)) {
                        best = Some((d, l));
                    }
                }
            }
            if let Some((_, l)) = best {
                let gx = x + mask.x0 as i64;
                let gy = y + mask.y0 as i64;
                let a = &mut acc[l as usize];
                a.sx += gx as f64;
                a.sy += gy as f64;
                a.n += 1;
                match &mut a.bbox {
                    Some(b) => b.include(gx as i32, gy as i32),
                    None => a.bbox = Some(BBox::point(gx as i32, gy as i32)),
                }
            }
        }
    }

    acc.into_iter()
        .enumerate()
        .filter(|(l, _)| keep[*l])
        .filter_map(|(_, a)| {
            let bbox = a.bbox?;
            Some(Detection {
                centroid: Vector2::new(a.sx / a.n as f64, a.sy / a.n as f64),
                bbox,
                area: a.n,
                ellipse: None,
            })
        })
        .collect()
}
