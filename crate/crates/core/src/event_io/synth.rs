//! Brightness-threshold event simulator.
//!
//! Every pixel keeps a reference log intensity. Whenever the sampled log
//! intensity moves by the contrast threshold `C` away from the reference, an
//! event of the matching polarity is emitted and the reference steps by
//! `p * C`. Crossing times are linearly interpolated between the two samples
//! that bracket them.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Event, EventStream, Polarity};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Bar,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Translate,
    Rotate,
    Expand,
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "bar" => Ok(ShapeKind::Bar),
            "square" => Ok(ShapeKind::Square),
            other => Err(Error::Config(format!("unknown shape kind '{other}'"))),
        }
    }
}

impl FromStr for MotionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(MotionKind::Translate),
            "rotate" => Ok(MotionKind::Rotate),
            "expand" => Ok(MotionKind::Expand),
            other => Err(Error::Config(format!("unknown motion kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub shape: ShapeKind,
    pub motion: MotionKind,
    /// Contrast threshold in log-intensity units.
    pub threshold: f64,
    pub duration_us: u64,
    pub timestep_us: u64,
    pub width: u16,
    pub height: u16,
    pub seed: u64,
    /// Motion magnitude multiplier; zero gives a static scene.
    #[serde(default = "default_speed")]
    pub speed: f64,
}

fn default_speed() -> f64 {
    1.0
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config("contrast threshold must be positive".into()));
        }
        if self.timestep_us == 0 || self.duration_us == 0 {
            return Err(Error::Config("duration and timestep must be positive".into()));
        }
        if self.duration_us % self.timestep_us != 0 {
            return Err(Error::Config(format!(
                "timestep {} does not divide duration {}",
                self.timestep_us, self.duration_us
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("sensor geometry must be non-empty".into()));
        }
        Ok(())
    }
}

/// A simulated event together with the reference log intensity the pixel
/// holds right after emitting it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedEvent {
    pub event: Event,
    pub level: f64,
}

/// Runs the threshold model over an arbitrary log-intensity field
/// `log_intensity(x, y, t_us)`, sampled at every multiple of `timestep_us`.
/// Events come back sorted by timestamp.
pub fn simulate(
    width: u16,
    height: u16,
    duration_us: u64,
    timestep_us: u64,
    threshold: f64,
    log_intensity: impl Fn(u16, u16, f64) -> f64,
) -> Vec<SimulatedEvent> {
    let tol = threshold * 1e-9;
    let npix = width as usize * height as usize;
    let mut reference = Vec::with_capacity(npix);
    let mut previous = Vec::with_capacity(npix);
    for y in 0..height {
        for x in 0..width {
            let l = log_intensity(x, y, 0.0);
            reference.push(l);
            previous.push(l);
        }
    }
    let mut out = Vec::new();
    let steps = duration_us / timestep_us;
    for step in 1..=steps {
        let t0 = ((step - 1) * timestep_us) as f64;
        let t1 = (step * timestep_us) as f64;
        for y in 0..height {
            for x in 0..width {
                let idx = y as usize * width as usize + x as usize;
                let (l0, l1) = (previous[idx], log_intensity(x, y, t1));
                let r = &mut reference[idx];
                while l1 - *r >= threshold - tol || *r - l1 >= threshold - tol {
                    let p = if l1 > *r { Polarity::On } else { Polarity::Off };
                    *r += threshold * p.sign() as f64;
                    let frac = if l1 != l0 { ((*r - l0) / (l1 - l0)).clamp(0.0, 1.0) } else { 1.0 };
                    let t = (t0 + frac * (t1 - t0)).floor() as u64;
                    out.push(SimulatedEvent {
                        event: Event::new(x, y, t, p),
                        level: *r,
                    });
                }
                previous[idx] = l1;
            }
        }
    }
    out.sort_by_key(|e| e.event.t);
    out
}

/// Pose of the rendered shape at normalized time `u`.
struct Pose {
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
}

struct Scene {
    shape: ShapeKind,
    motion: MotionKind,
    base: Pose,
    velocity: (f64, f64),
    spin: f64,
    growth: f64,
    half_extent: (f64, f64),
    background: f64,
    foreground: f64,
}

impl Scene {
    fn sample(cfg: &SceneConfig) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let side = w.min(h);
        let travel = cfg.speed * 0.35 * side;
        let heading = rng.random_range(0.0..2.0 * PI);
        let velocity = (travel * heading.cos(), travel * heading.sin());
        // keep translating shapes roughly centred over their path
        let jitter = 0.08 * side;
        let cx = w / 2.0 - velocity.0 / 2.0 + rng.random_range(-jitter..jitter);
        let cy = h / 2.0 - velocity.1 / 2.0 + rng.random_range(-jitter..jitter);
        let size = side * rng.random_range(0.14..0.2);
        let half_extent = match cfg.shape {
            ShapeKind::Disk | ShapeKind::Square => (size, size),
            ShapeKind::Bar => (size * 1.6, size * 0.35),
        };
        let spin_dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let background = rng.random_range(-0.5..0.5);
        let contrast = rng.random_range(1.0..1.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Scene {
            shape: cfg.shape,
            motion: cfg.motion,
            base: Pose {
                cx,
                cy,
                angle: rng.random_range(0.0..PI),
                scale: 1.0,
            },
            velocity,
            spin: spin_dir * cfg.speed * PI * 0.75,
            growth: cfg.speed * 0.9,
            half_extent,
            background,
            foreground: background + contrast,
        }
    }

    fn pose(&self, u: f64) -> Pose {
        let b = &self.base;
        match self.motion {
            MotionKind::Translate => Pose {
                cx: b.cx + self.velocity.0 * u,
                cy: b.cy + self.velocity.1 * u,
                angle: b.angle,
                scale: b.scale,
            },
            MotionKind::Rotate => Pose {
                cx: b.cx + self.velocity.0 / 2.0,
                cy: b.cy + self.velocity.1 / 2.0,
                angle: b.angle + self.spin * u,
                scale: b.scale,
            },
            MotionKind::Expand => Pose {
                cx: b.cx + self.velocity.0 / 2.0,
                cy: b.cy + self.velocity.1 / 2.0,
                angle: b.angle,
                scale: b.scale * (0.55 + self.growth * u),
            },
        }
    }

    /// Approximate signed distance (negative inside) from the pixel centre.
    fn signed_distance(&self, pose: &Pose, px: f64, py: f64) -> f64 {
        let (dx, dy) = (px - pose.cx, py - pose.cy);
        let (s, c) = pose.angle.sin_cos();
        let (qx, qy) = (c * dx + s * dy, -s * dx + c * dy);
        let (a, b) = (self.half_extent.0 * pose.scale, self.half_extent.1 * pose.scale);
        match self.shape {
            ShapeKind::Disk => (dx * dx + dy * dy).sqrt() - a,
            ShapeKind::Square | ShapeKind::Bar => (qx.abs() - a).max(qy.abs() - b),
        }
    }

    fn log_intensity(&self, pose: &Pose, x: u16, y: u16) -> f64 {
        let d = self.signed_distance(pose, x as f64 + 0.5, y as f64 + 0.5);
        let cover = (0.5 - d).clamp(0.0, 1.0);
        self.background + cover * (self.foreground - self.background)
    }
}

/// Renders an analytic moving shape and converts it to events.
/// Deterministic for a fixed seed.
pub fn synthesize_stream(cfg: &SceneConfig) -> Result<EventStream> {
    cfg.validate()?;
    let scene = Scene::sample(cfg);
    let duration = cfg.duration_us as f64;
    // pose only depends on time, so evaluate it once per sample instant
    let cache = std::cell::RefCell::new((f64::NAN, scene.pose(0.0)));
    let field = |x: u16, y: u16, t: f64| {
        let mut c = cache.borrow_mut();
        if c.0 != t {
            *c = (t, scene.pose(t / duration));
        }
        scene.log_intensity(&c.1, x, y)
    };
    let events: Vec<Event> = simulate(
        cfg.width,
        cfg.height,
        cfg.duration_us,
        cfg.timestep_us,
        cfg.threshold,
        field,
    )
    .into_iter()
    .map(|e| e.event)
    .collect();
    if events.is_empty() {
        return Err(Error::EmptySynthesis);
    }
    EventStream::new(events, cfg.width, cfg.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn scene(shape: ShapeKind, motion: MotionKind, seed: u64) -> SceneConfig {
        SceneConfig {
            shape,
            motion,
            threshold: 0.25,
            duration_us: 100_000,
            timestep_us: 1_000,
            width: 48,
            height: 48,
            seed,
            speed: 1.0,
        }
    }

    #[test]
    fn static_scene_is_an_error() {
        let mut cfg = scene(ShapeKind::Disk, MotionKind::Translate, 3);
        cfg.speed = 0.0;
        assert!(matches!(synthesize_stream(&cfg), Err(Error::EmptySynthesis)));
    }

    #[test]
    fn ramp_of_three_thresholds_gives_three_events() {
        let c = 0.2;
        let duration = 10_000u64;
        let events = simulate(3, 2, duration, 100, c, |x, y, t| {
            if (x, y) == (1, 1) {
                3.0 * c * t / duration as f64
            } else {
                0.7
            }
        });
        assert_eq!(events.len(), 3);
        for e in &events {
            assert_eq!((e.event.x, e.event.y, e.event.p), (1, 1, Polarity::On));
        }
        // crossings at 1/3 and 2/3 of the ramp, last one at the end
        let ts: Vec<u64> = events.iter().map(|e| e.event.t).collect();
        assert!((3332..=3334).contains(&ts[0]), "{ts:?}");
        assert!((6665..=6667).contains(&ts[1]), "{ts:?}");
        assert!((9999..=10_000).contains(&ts[2]), "{ts:?}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = scene(ShapeKind::Disk, MotionKind::Translate, 42);
        let a = synthesize_stream(&cfg).unwrap();
        let b = synthesize_stream(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a, b);
        let c = synthesize_stream(&scene(ShapeKind::Disk, MotionKind::Translate, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_shape_and_motion_produces_events() {
        for shape in [ShapeKind::Disk, ShapeKind::Bar, ShapeKind::Square] {
            for motion in [MotionKind::Translate, MotionKind::Rotate, MotionKind::Expand] {
                let res = synthesize_stream(&scene(shape, motion, 5));
                if shape == ShapeKind::Disk && motion == MotionKind::Rotate {
                    // a rotating disk leaves the image unchanged
                    assert!(matches!(res, Err(Error::EmptySynthesis)));
                } else {
                    let s = res.unwrap();
                    assert!(s.len() > 100, "{shape:?}/{motion:?}: {}", s.len());
                    assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
                }
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = scene(ShapeKind::Disk, MotionKind::Translate, 1);
        cfg.timestep_us = 3_000;
        assert!(matches!(synthesize_stream(&cfg), Err(Error::Config(_))));
        cfg.timestep_us = 1_000;
        cfg.threshold = 0.0;
        assert!(matches!(synthesize_stream(&cfg), Err(Error::Config(_))));
        assert!("blob".parse::<ShapeKind>().is_err());
        assert!("spin".parse::<MotionKind>().is_err());
    }

    /// Adjacent events of one pixel are exactly one threshold apart in the
    /// reference trace, and each reference level is reachable by the linearly
    /// interpolated sampled intensity at the event's step.
    #[test]
    fn per_pixel_threshold_separation() {
        let c = 0.3;
        let duration = 20_000u64;
        let step = 500u64;
        let field = |x: u16, y: u16, t: f64| {
            let u = t / duration as f64;
            ((x as f64 * 0.7 + y as f64 * 1.3) + 6.0 * u).sin() * 1.5
        };
        let events = simulate(6, 5, duration, step, c, field);
        assert!(!events.is_empty());
        let mut per_pixel: HashMap<(u16, u16), Vec<SimulatedEvent>> = HashMap::new();
        for e in &events {
            per_pixel.entry((e.event.x, e.event.y)).or_default().push(*e);
        }
        for ((x, y), evs) in per_pixel {
            let mut last = field(x, y, 0.0);
            for e in evs {
                let delta = e.level - last;
                assert!((delta.abs() - c).abs() < 1e-9, "step {delta}");
                assert_eq!(delta > 0.0, e.event.p == Polarity::On);
                last = e.level;
                let k = (e.event.t / step).min(duration / step - 1);
                let (a, b) = (field(x, y, (k * step) as f64), field(x, y, ((k + 1) * step) as f64));
                let (lo, hi) = (a.min(b), a.max(b));
                // event time is floored, so it may sit one sample early
                let prev = field(x, y, (k.saturating_sub(1) * step) as f64);
                let lo = lo.min(prev);
                let hi = hi.max(prev);
                assert!(e.level >= lo - 1e-9 && e.level <= hi + 1e-9);
            }
        }
    }
}
