//! Minimal rasterizer. Coverage is decided at pixel centers, so shapes are
//! aliased and every draw is bit-deterministic.

use crate::video::Image;

pub type Rgb = [u8; 3];

/// Writes `color` wherever `covered(px, py)` holds, `px`/`py` being pixel centers.
fn fill_where(img: &mut Image, bbox: [f32; 4], color: Rgb, covered: impl Fn(f32, f32) -> bool) {
    let x0 = bbox[0].floor().max(0.0) as usize;
    let y0 = bbox[1].floor().max(0.0) as usize;
    let x1 = (bbox[2].ceil().max(0.0) as usize).min(img.width);
    let y1 = (bbox[3].ceil().max(0.0) as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            if covered(x as f32 + 0.5, y as f32 + 0.5) {
                img.put(x, y, color);
            }
        }
    }
}

pub fn linear_gradient(img: &mut Image, from: Rgb, to: Rgb, angle: f32) {
    let (w, h) = (img.width as f32, img.height as f32);
    let (dx, dy) = (angle.cos(), angle.sin());
    let span = (w * dx.abs() + h * dy.abs()).max(1.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = (x as f32 + 0.5 - w / 2.0) * dx + (y as f32 + 0.5 - h / 2.0) * dy;
            let a = (p / span + 0.5).clamp(0.0, 1.0);
            let mut c = [0u8; 3];
            for k in 0..3 {
                c[k] = (from[k] as f32 * (1.0 - a) + to[k] as f32 * a).round() as u8;
            }
            img.put(x, y, c);
        }
    }
}

pub fn fill_circle(img: &mut Image, cx: f32, cy: f32, r: f32, color: Rgb) {
    let r2 = r * r;
    fill_where(img, [cx - r, cy - r, cx + r, cy + r], color, |x, y| {
        (x - cx).powi(2) + (y - cy).powi(2) <= r2
    });
}

pub fn fill_ellipse(img: &mut Image, cx: f32, cy: f32, a: f32, b: f32, angle: f32, color: Rgb) {
    let (c, s) = (angle.cos(), angle.sin());
    let r = a.max(b);
    fill_where(img, [cx - r, cy - r, cx + r, cy + r], color, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    });
}

pub fn point_in_polygon(pts: &[[f32; 2]], x: f32, y: f32) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (pts[i][0], pts[i][1]);
        let (xj, yj) = (pts[j][0], pts[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn fill_polygon(img: &mut Image, pts: &[[f32; 2]], color: Rgb) {
    if pts.len() < 3 {
        return;
    }
    let mut bbox = [f32::MAX, f32::MAX, f32::MIN, f32::MIN];
    for p in pts {
        bbox[0] = bbox[0].min(p[0]);
        bbox[1] = bbox[1].min(p[1]);
        bbox[2] = bbox[2].max(p[0]);
        bbox[3] = bbox[3].max(p[1]);
    }
    fill_where(img, bbox, color, |x, y| point_in_polygon(pts, x, y));
}

/// Solid quad covering the segment `a -> b` with the given thickness.
pub fn thick_segment(a: [f32; 2], b: [f32; 2], thickness: f32) -> [[f32; 2]; 4] {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt().max(1e-6);
    let (nx, ny) = (-dy / len * thickness / 2.0, dx / len * thickness / 2.0);
    [
        [a[0] + nx, a[1] + ny],
        [b[0] + nx, b[1] + ny],
        [b[0] - nx, b[1] - ny],
        [a[0] - nx, a[1] - ny],
    ]
}

/// One-pixel DDA line.
pub fn draw_line(img: &mut Image, a: [f32; 2], b: [f32; 2], color: Rgb) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let x = a[0] + (b[0] - a[0]) * t;
        let y = a[1] + (b[1] - a[1]) * t;
        if x >= 0.0 && y >= 0.0 {
            let (xi, yi) = (x as usize, y as usize);
            if xi < img.width && yi < img.height {
                img.put(xi, yi, color);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_of_radius_three_covers_expected_pixels() {
        let mut img = Image::new(16, 16);
        fill_circle(&mut img, 8.0, 8.0, 3.0, [255, 0, 0]);
        let count = img.data.chunks(3).filter(|p| p[0] == 255).count();
        // pixel centers within radius 3 of (8, 8)
        let mut expected = 0;
        for y in 0..16 {
            for x in 0..16 {
                let (dx, dy) = (x as f32 + 0.5 - 8.0, y as f32 + 0.5 - 8.0);
                if dx * dx + dy * dy <= 9.0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(count, expected);
        assert!(count > 20);
    }

    #[test]
    fn polygon_square() {
        let mut img = Image::new(8, 8);
        fill_polygon(&mut img, &[[1.0, 1.0], [5.0, 1.0], [5.0, 5.0], [1.0, 5.0]], [9, 9, 9]);
        let count = img.data.chunks(3).filter(|p| p[0] == 9).count();
        assert_eq!(count, 16);
    }
}
