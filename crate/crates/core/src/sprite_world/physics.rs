//! Per-class object dynamics driven by the cursor track.
//!
//! All simulators advance one frame with a fixed number of substeps and use
//! the cursor position linearly interpolated between the previous and the
//! current frame, so the object state at frame `t` depends only on cursor
//! positions at frames `<= t`.

use serde::{Deserialize, Serialize};

use super::raster::{self, Rgb};
use super::SpriteClass;
use crate::rng::SeededRng;
use crate::video::Image;

pub const CURSOR_RADIUS: f32 = 3.0;
const SUBSTEPS: usize = 8;
const DEFORMABLE_POINTS: usize = 12;

/// Static per-clip randomness: layout, colors, cursor path shape, object personality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneParams {
    pub class: SpriteClass,
    pub height: usize,
    pub width: usize,
    /// Geometry scale relative to a 64 px frame.
    pub unit: f32,
    pub bg_from: Rgb,
    pub bg_to: Rgb,
    pub bg_angle: f32,
    pub distractors: Vec<Distractor>,
    pub object_center: [f32; 2],
    pub object_color: Rgb,
    pub rest_angle: f32,
    pub wander_phase: [f32; 3],
    pub attracted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Distractor {
    pub shape: u8,
    pub center: [f32; 2],
    pub size: f32,
    pub color: Rgb,
}

fn muted_color(rng: &mut SeededRng, lo: f64, hi: f64) -> Rgb {
    let g = rng.uniform(lo, hi);
    let b = rng.uniform(lo, hi);
    // keep red below the other channels so only the cursor is red-dominant
    let r = g.min(b) * rng.uniform(0.55, 0.9);
    [r as u8, g as u8, b as u8]
}

impl SceneParams {
    pub fn sample(class: SpriteClass, height: usize, width: usize, rng: &mut SeededRng) -> Self {
        let unit = width.min(height) as f32 / 64.0;
        let (w, h) = (width as f32, height as f32);
        let object_center = [
            w / 2.0 + rng.uniform(-6.0, 6.0) as f32 * unit,
            h / 2.0 + rng.uniform(-6.0, 6.0) as f32 * unit,
        ];
        let bg_from = muted_color(rng, 70.0, 150.0);
        let bg_to = muted_color(rng, 90.0, 190.0);
        let bg_angle = rng.uniform(0.0, std::f64::consts::TAU) as f32;
        let mut distractors = Vec::with_capacity(3);
        let mut tries = 0;
        while distractors.len() < 3 && tries < 200 {
            tries += 1;
            let c = [
                rng.uniform(4.0, w as f64 - 4.0) as f32,
                rng.uniform(4.0, h as f64 - 4.0) as f32,
            ];
            let d = ((c[0] - object_center[0]).powi(2) + (c[1] - object_center[1]).powi(2)).sqrt();
            if d < 20.0 * unit {
                continue;
            }
            distractors.push(Distractor {
                shape: rng.below(3) as u8,
                center: c,
                size: rng.uniform(2.5, 5.0) as f32 * unit,
                color: muted_color(rng, 40.0, 120.0),
            });
        }
        let object_color = match class {
            SpriteClass::Deformable => [30, rng.uniform(150.0, 210.0) as u8, rng.uniform(60.0, 120.0) as u8],
            SpriteClass::Articulated => [rng.uniform(150.0, 190.0) as u8, rng.uniform(170.0, 215.0) as u8, 40],
            SpriteClass::Creature => [rng.uniform(90.0, 130.0) as u8, 50, rng.uniform(180.0, 230.0) as u8],
        };
        Self {
            class,
            height,
            width,
            unit,
            bg_from,
            bg_to,
            bg_angle,
            distractors,
            object_center,
            object_color,
            rest_angle: rng.uniform(-0.6, 0.6) as f32,
            wander_phase: [
                rng.uniform(0.0, 6.28) as f32,
                rng.uniform(0.0, 6.28) as f32,
                rng.uniform(0.0, 6.28) as f32,
            ],
            attracted: rng.below(2) == 0,
        }
    }

    pub fn render_background(&self) -> Image {
        let mut img = Image::new(self.height, self.width);
        raster::linear_gradient(&mut img, self.bg_from, self.bg_to, self.bg_angle);
        for d in &self.distractors {
            let [cx, cy] = d.center;
            match d.shape {
                0 => raster::fill_circle(&mut img, cx, cy, d.size, d.color),
                1 => raster::fill_polygon(
                    &mut img,
                    &[
                        [cx - d.size, cy - d.size],
                        [cx + d.size, cy - d.size],
                        [cx + d.size, cy + d.size],
                        [cx - d.size, cy + d.size],
                    ],
                    d.color,
                ),
                _ => raster::fill_polygon(
                    &mut img,
                    &[[cx, cy - d.size], [cx + d.size, cy + d.size], [cx - d.size, cy + d.size]],
                    d.color,
                ),
            }
        }
        img
    }
}

/// Smooth approach-push-retreat path towards the object.
pub fn sample_cursor_track(params: &SceneParams, frames: usize, rng: &mut SeededRng) -> Vec<[f32; 2]> {
    let u = params.unit;
    let (w, h) = (params.width as f32, params.height as f32);
    let clamp = |p: [f32; 2]| [p[0].clamp(2.0, w - 2.0), p[1].clamp(2.0, h - 2.0)];
    let c = params.object_center;
    let phi = rng.uniform(0.0, std::f64::consts::TAU) as f32;
    let dir = [phi.cos(), phi.sin()];
    let start = clamp([c[0] + dir[0] * 26.0 * u, c[1] + dir[1] * 26.0 * u]);
    let touch = clamp([c[0] + dir[0] * 3.0 * u, c[1] + dir[1] * 3.0 * u]);
    let push_depth = rng.uniform(2.0, 6.0) as f32;
    let push = clamp([c[0] - dir[0] * push_depth * u, c[1] - dir[1] * push_depth * u]);
    let psi = phi + rng.uniform(-1.5, 1.5) as f32;
    let leave = clamp([c[0] + psi.cos() * 22.0 * u, c[1] + psi.sin() * 22.0 * u]);

    let last = (frames - 1) as f32;
    let t_touch = last * rng.uniform(0.2, 0.45) as f32;
    let t_push = t_touch + (last - t_touch) * rng.uniform(0.3, 0.55) as f32;
    let keys = [(0.0, start), (t_touch, touch), (t_push, push), (last, leave)];
    let wobble_amp = rng.uniform(0.3, 1.0) as f32 * u;
    let wobble_freq = rng.uniform(0.2, 0.5) as f32;
    let wobble_phase = rng.uniform(0.0, 6.28) as f32;

    (0..frames)
        .map(|t| {
            let t = t as f32;
            let mut seg = 0;
            while seg + 2 < keys.len() && t > keys[seg + 1].0 {
                seg += 1;
            }
            let (ta, pa) = keys[seg];
            let (tb, pb) = keys[seg + 1];
            let a = if tb > ta { ((t - ta) / (tb - ta)).clamp(0.0, 1.0) } else { 1.0 };
            let s = a * a * (3.0 - 2.0 * a);
            let wob = wobble_amp * (wobble_freq * t + wobble_phase).sin();
            clamp([
                pa[0] + (pb[0] - pa[0]) * s - dir[1] * wob,
                pa[1] + (pb[1] - pa[1]) * s + dir[0] * wob,
            ])
        })
        .collect()
}

/// Cursor glyph: filled disc plus a two-segment finger stroke.
pub fn draw_cursor(img: &mut Image, p: [f32; 2]) {
    raster::fill_circle(img, p[0], p[1], CURSOR_RADIUS, CURSOR_COLOR);
    let knuckle = [p[0] + 1.0, p[1] - 6.0];
    let tip = [p[0] + 3.0, p[1] - 8.0];
    raster::draw_line(img, p, knuckle, CURSOR_COLOR);
    raster::draw_line(img, knuckle, tip, CURSOR_COLOR);
}

pub const CURSOR_COLOR: Rgb = [235, 36, 48];

/// Per-frame object state, enough to render and to audit the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub centroid: [f32; 2],
    pub angle: f32,
    pub contact: bool,
    /// Shape outline (deformable ring, flap quad) or body pose for creatures.
    pub outline: Vec<[f32; 2]>,
}

fn sub(a: [f32; 2], b: [f32; 2]) -> [f32; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f32; 2]) -> f32 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

fn lerp(a: [f32; 2], b: [f32; 2], s: f32) -> [f32; 2] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s]
}

/// Runs the class simulator over the whole cursor track.
pub fn simulate(params: &SceneParams, cursor: &[[f32; 2]]) -> Vec<ObjectState> {
    match params.class {
        SpriteClass::Deformable => Deformable::new(params).run(cursor),
        SpriteClass::Articulated => Hinge::new(params).run(cursor),
        SpriteClass::Creature => Creature::new(params).run(cursor),
    }
}

struct Deformable {
    unit: f32,
    center: [f32; 2],
    center_vel: [f32; 2],
    anchor: [f32; 2],
    rest_offsets: Vec<[f32; 2]>,
    edge_rest: Vec<f32>,
    points: Vec<[f32; 2]>,
    vels: Vec<[f32; 2]>,
}

impl Deformable {
    fn new(params: &SceneParams) -> Self {
        let radius = 7.0 * params.unit;
        let c = params.object_center;
        let rest_offsets: Vec<[f32; 2]> = (0..DEFORMABLE_POINTS)
            .map(|i| {
                let a = i as f32 / DEFORMABLE_POINTS as f32 * std::f32::consts::TAU + params.rest_angle;
                // slightly squashed so the blob has an orientation
                [a.cos() * radius * 1.1, a.sin() * radius * 0.9]
            })
            .collect();
        let points: Vec<[f32; 2]> = rest_offsets.iter().map(|o| [c[0] + o[0], c[1] + o[1]]).collect();
        let edge_rest = (0..DEFORMABLE_POINTS)
            .map(|i| norm(sub(points[(i + 1) % DEFORMABLE_POINTS], points[i])))
            .collect();
        Self {
            unit: params.unit,
            center: c,
            center_vel: [0.0; 2],
            anchor: c,
            rest_offsets,
            edge_rest,
            vels: vec![[0.0; 2]; DEFORMABLE_POINTS],
            points,
        }
    }

    fn state(&self, contact: bool) -> ObjectState {
        let n = self.points.len() as f32;
        let mut c = [0.0f32; 2];
        for p in &self.points {
            c[0] += p[0] / n;
            c[1] += p[1] / n;
        }
        ObjectState {
            centroid: c,
            angle: 0.0,
            contact,
            outline: self.points.clone(),
        }
    }

    fn in_contact(&self, m: [f32; 2]) -> bool {
        let reach = CURSOR_RADIUS + 1.5;
        self.points.iter().any(|p| norm(sub(*p, m)) < reach) || raster::point_in_polygon(&self.points, m[0], m[1])
    }

    fn step(&mut self, m: [f32; 2], dt: f32) -> bool {
        const K_SHAPE: f32 = 0.08;
        const K_EDGE: f32 = 0.10;
        const K_ANCHOR: f32 = 0.004;
        const DAMP: f32 = 0.15;
        const K_CONTACT: f32 = 0.6;
        let n = self.points.len();
        let reach = CURSOR_RADIUS + 1.5;
        let mut touched = false;
        let mut center_force = [0.0f32; 2];
        let mut forces = vec![[0.0f32; 2]; n];
        for i in 0..n {
            let target = [self.center[0] + self.rest_offsets[i][0], self.center[1] + self.rest_offsets[i][1]];
            let s = sub(target, self.points[i]);
            forces[i][0] += K_SHAPE * s[0];
            forces[i][1] += K_SHAPE * s[1];
            center_force[0] -= K_SHAPE * s[0];
            center_force[1] -= K_SHAPE * s[1];
            let j = (i + 1) % n;
            let e = sub(self.points[j], self.points[i]);
            let len = norm(e);
            if len > 1e-6 {
                let f = K_EDGE * (len - self.edge_rest[i]) / len;
                forces[i][0] += f * e[0];
                forces[i][1] += f * e[1];
                forces[j][0] -= f * e[0];
                forces[j][1] -= f * e[1];
            }
            let d = sub(self.points[i], m);
            let dist = norm(d);
            if dist < reach {
                touched = true;
                let f = K_CONTACT * (reach - dist) / dist.max(1e-3);
                forces[i][0] += f * d[0];
                forces[i][1] += f * d[1];
            }
        }
        if raster::point_in_polygon(&self.points, m[0], m[1]) {
            touched = true;
            let d = sub(self.center, m);
            let dist = norm(d).max(1e-3);
            let depth = (7.0 * self.unit + CURSOR_RADIUS - dist).max(0.0);
            center_force[0] += 0.05 * depth * d[0] / dist;
            center_force[1] += 0.05 * depth * d[1] / dist;
        }
        let a = sub(self.anchor, self.center);
        center_force[0] += K_ANCHOR * a[0] - DAMP * self.center_vel[0];
        center_force[1] += K_ANCHOR * a[1] - DAMP * self.center_vel[1];
        for i in 0..n {
            forces[i][0] -= DAMP * self.vels[i][0];
            forces[i][1] -= DAMP * self.vels[i][1];
            self.vels[i][0] += dt * forces[i][0];
            self.vels[i][1] += dt * forces[i][1];
            self.points[i][0] += dt * self.vels[i][0];
            self.points[i][1] += dt * self.vels[i][1];
        }
        // the core is heavier than a rim point
        self.center_vel[0] += dt * center_force[0] / 4.0;
        self.center_vel[1] += dt * center_force[1] / 4.0;
        self.center[0] += dt * self.center_vel[0];
        self.center[1] += dt * self.center_vel[1];
        touched
    }

    fn run(mut self, cursor: &[[f32; 2]]) -> Vec<ObjectState> {
        let mut out = Vec::with_capacity(cursor.len());
        out.push(self.state(self.in_contact(cursor[0])));
        for t in 1..cursor.len() {
            let mut touched = false;
            for s in 1..=SUBSTEPS {
                let m = lerp(cursor[t - 1], cursor[t], s as f32 / SUBSTEPS as f32);
                touched |= self.step(m, 1.0 / SUBSTEPS as f32);
            }
            out.push(self.state(touched));
        }
        out
    }
}

struct Hinge {
    pivot: [f32; 2],
    length: f32,
    thickness: f32,
    angle: f32,
    omega: f32,
    limits: (f32, f32),
}

impl Hinge {
    fn new(params: &SceneParams) -> Self {
        let u = params.unit;
        let c = params.object_center;
        Self {
            pivot: [c[0] - 7.0 * u, c[1]],
            length: 15.0 * u,
            thickness: 3.0 * u,
            angle: params.rest_angle,
            omega: 0.0,
            limits: (params.rest_angle - 1.3, params.rest_angle + 1.3),
        }
    }

    fn axis(&self) -> [f32; 2] {
        [self.angle.cos(), self.angle.sin()]
    }

    /// Closest point on the flap axis, lever arm and signed push direction.
    fn contact(&self, m: [f32; 2]) -> Option<(f32, f32)> {
        let a = self.axis();
        let rel = sub(m, self.pivot);
        let s = (rel[0] * a[0] + rel[1] * a[1]).clamp(0.0, self.length);
        let q = [self.pivot[0] + a[0] * s, self.pivot[1] + a[1] * s];
        let d = sub(q, m);
        let dist = norm(d);
        let reach = CURSOR_RADIUS + self.thickness / 2.0;
        if dist >= reach || s <= 0.0 {
            return None;
        }
        let n = if dist > 1e-4 {
            [d[0] / dist, d[1] / dist]
        } else {
            [-a[1], a[0]]
        };
        // torque of a push along n applied at lever arm s
        let cross = a[0] * n[1] - a[1] * n[0];
        Some((reach - dist, s * cross))
    }

    fn outline(&self) -> Vec<[f32; 2]> {
        let a = self.axis();
        let tip = [self.pivot[0] + a[0] * self.length, self.pivot[1] + a[1] * self.length];
        raster::thick_segment(self.pivot, tip, self.thickness).to_vec()
    }

    fn state(&self, contact: bool) -> ObjectState {
        let a = self.axis();
        ObjectState {
            centroid: [
                self.pivot[0] + a[0] * self.length / 2.0,
                self.pivot[1] + a[1] * self.length / 2.0,
            ],
            angle: self.angle,
            contact,
            outline: self.outline(),
        }
    }

    fn run(mut self, cursor: &[[f32; 2]]) -> Vec<ObjectState> {
        const K_PUSH: f32 = 0.004;
        const DAMP: f32 = 0.25;
        let mut out = Vec::with_capacity(cursor.len());
        out.push(self.state(self.contact(cursor[0]).is_some()));
        for t in 1..cursor.len() {
            let mut touched = false;
            for s in 1..=SUBSTEPS {
                let dt = 1.0 / SUBSTEPS as f32;
                let m = lerp(cursor[t - 1], cursor[t], s as f32 / SUBSTEPS as f32);
                let mut torque = 0.0;
                if let Some((depth, lever)) = self.contact(m) {
                    touched = true;
                    torque = K_PUSH * depth * lever;
                }
                if torque != 0.0 || self.omega != 0.0 {
                    self.omega += dt * (torque - DAMP * self.omega);
                    self.angle += dt * self.omega;
                    if self.angle < self.limits.0 || self.angle > self.limits.1 {
                        self.angle = self.angle.clamp(self.limits.0, self.limits.1);
                        self.omega = 0.0;
                    }
                }
            }
            out.push(self.state(touched));
        }
        out
    }
}

struct Creature {
    unit: f32,
    bounds: [f32; 2],
    pos: [f32; 2],
    vel: [f32; 2],
    heading: f32,
    phase: [f32; 3],
    attracted: bool,
    time: f32,
}

impl Creature {
    fn new(params: &SceneParams) -> Self {
        Self {
            unit: params.unit,
            bounds: [params.width as f32, params.height as f32],
            pos: params.object_center,
            vel: [0.0; 2],
            heading: params.rest_angle + params.wander_phase[2],
            phase: params.wander_phase,
            attracted: params.attracted,
            time: 0.0,
        }
    }

    fn reach(&self) -> f32 {
        CURSOR_RADIUS + 5.0 * self.unit
    }

    fn state(&self, contact: bool) -> ObjectState {
        ObjectState {
            centroid: self.pos,
            angle: self.heading,
            contact,
            outline: vec![self.pos, [self.time, 0.0]],
        }
    }

    fn step(&mut self, m: [f32; 2], dt: f32) -> bool {
        let u = self.unit;
        self.time += dt;
        let t = self.time;
        let wander = self.phase[2] + 1.2 * (0.11 * t + self.phase[0]).sin() + 0.7 * (0.27 * t + self.phase[1]).sin();
        let speed = 0.45 * u;
        let desired = [wander.cos() * speed, wander.sin() * speed];
        let mut f = [0.15 * (desired[0] - self.vel[0]), 0.15 * (desired[1] - self.vel[1])];
        let d = sub(m, self.pos);
        let dist = norm(d).max(1e-3);
        let radius = 20.0 * u;
        if dist < radius {
            let sign = if self.attracted { 1.0 } else { -1.0 };
            let g = sign * 0.06 * u * (1.0 - dist / radius);
            f[0] += g * d[0] / dist;
            f[1] += g * d[1] / dist;
        }
        let margin = 8.0 * u;
        for k in 0..2 {
            if self.pos[k] < margin {
                f[k] += 0.02 * (margin - self.pos[k]);
            }
            if self.pos[k] > self.bounds[k] - margin {
                f[k] -= 0.02 * (self.pos[k] - (self.bounds[k] - margin));
            }
        }
        self.vel[0] += dt * f[0];
        self.vel[1] += dt * f[1];
        self.pos[0] += dt * self.vel[0];
        self.pos[1] += dt * self.vel[1];
        if norm(self.vel) > 1e-4 {
            self.heading = self.vel[1].atan2(self.vel[0]);
        }
        dist < self.reach()
    }

    fn run(mut self, cursor: &[[f32; 2]]) -> Vec<ObjectState> {
        let mut out = Vec::with_capacity(cursor.len());
        let c0 = norm(sub(cursor[0], self.pos)) < self.reach();
        out.push(self.state(c0));
        for t in 1..cursor.len() {
            let mut touched = false;
            for s in 1..=SUBSTEPS {
                let m = lerp(cursor[t - 1], cursor[t], s as f32 / SUBSTEPS as f32);
                touched |= self.step(m, 1.0 / SUBSTEPS as f32);
            }
            out.push(self.state(touched));
        }
        out
    }
}

/// Draws the object for one frame.
pub fn draw_object(img: &mut Image, params: &SceneParams, state: &ObjectState) {
    let u = params.unit;
    let color = params.object_color;
    let dark = [color[0] / 2, color[1] / 2, color[2] / 2];
    match params.class {
        SpriteClass::Deformable => {
            raster::fill_polygon(img, &state.outline, color);
            raster::fill_circle(img, state.centroid[0], state.centroid[1], 2.0 * u, dark);
        }
        SpriteClass::Articulated => {
            let c = params.object_center;
            let pivot = [c[0] - 7.0 * u, c[1]];
            let wall = [110, 90, 70];
            raster::fill_polygon(
                img,
                &[
                    [pivot[0] - 4.0 * u, pivot[1] - 7.0 * u],
                    [pivot[0], pivot[1] - 7.0 * u],
                    [pivot[0], pivot[1] + 7.0 * u],
                    [pivot[0] - 4.0 * u, pivot[1] + 7.0 * u],
                ],
                wall,
            );
            raster::fill_polygon(img, &state.outline, color);
            raster::fill_circle(img, pivot[0], pivot[1], 1.6 * u, dark);
        }
        SpriteClass::Creature => {
            let [x, y] = state.centroid;
            let h = state.angle;
            let gait = state.outline.get(1).map(|p| p[0]).unwrap_or(0.0);
            let swing = (gait * 0.9).sin() * 2.0 * u;
            let (c, s) = (h.cos(), h.sin());
            for side in [-1.0f32, 1.0] {
                let base = [x - s * side * 2.0 * u, y + c * side * 2.0 * u];
                let foot = [
                    base[0] - s * side * 3.0 * u + c * swing * side,
                    base[1] + c * side * 3.0 * u + s * swing * side,
                ];
                raster::draw_line(img, base, foot, dark);
            }
            raster::fill_ellipse(img, x, y, 5.0 * u, 3.0 * u, h, color);
            raster::fill_circle(img, x + c * 5.0 * u, y + s * 5.0 * u, 2.0 * u, dark);
        }
    }
}
