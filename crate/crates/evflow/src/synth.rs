//! Deterministic synthetic event scenes with analytic ground-truth flow.
//!
//! Particles move along straight lines at constant velocity and emit events
//! at a configurable rate. Emission is rate-based rather than driven by a
//! simulated intensity signal; the nominal contrast threshold is carried as
//! metadata only. Ground truth for a volume of length `dt` is `v * dt`
//! pixels at every pixel the particle path touches.

use crate::error::{Error, Result};
use crate::event::{Event, Polarity, SensorSize};
use crate::motion::FlowField;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How event times are drawn along a particle trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emission {
    /// Evenly spaced times `i / rate`, starting at the scene origin.
    Uniform,
    /// Homogeneous Poisson process with the given rate.
    Poisson,
}

/// One moving point source.
#[derive(Debug, Clone, Copy)]
pub struct Particle {
    /// Start position (sub-pixel, `x` is the column).
    pub x0: f64,
    pub y0: f64,
    /// Velocity in pixels per second.
    pub vx: f64,
    pub vy: f64,
    pub polarity: Polarity,
}

/// Full description of a synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub sensor: SensorSize,
    pub particles: Vec<Particle>,
    /// Scene duration in seconds.
    pub duration: f64,
    /// Events per particle per second.
    pub event_rate: f64,
    /// Nominal trigger threshold; recorded for provenance, not simulated.
    pub contrast_threshold: f64,
    pub emission: Emission,
    /// Flip polarity on every successive event of a particle.
    pub alternate_polarity: bool,
    /// Keep pre-quantization positions alongside the quantized events.
    pub subpixel_positions: bool,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.event_rate <= 0.0 {
            return Err(Error::Config(format!(
                "event_rate must be positive, got {}",
                self.event_rate
            )));
        }
        if self.duration <= 0.0 {
            return Err(Error::Config(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        for (i, p) in self.particles.iter().enumerate() {
            // Endpoints suffice: trajectories are linear.
            for t in [0.0, self.duration] {
                let x = p.x0 + p.vx * t;
                let y = p.y0 + p.vy * t;
                if x < 0.0
                    || y < 0.0
                    || x > (self.sensor.w - 1) as f64
                    || y > (self.sensor.h - 1) as f64
                {
                    return Err(Error::ParticleOutOfBounds { index: i, t, x, y });
                }
            }
        }
        Ok(())
    }
}

/// Output of [`generate`]: the event stream plus a ground-truth factory.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub events: Vec<Event>,
    /// Pre-quantization event positions, present when
    /// `SceneSpec::subpixel_positions` is set; parallel to `events`.
    pub raw_positions: Option<Vec<[f64; 2]>>,
    spec: SceneSpec,
}

/// Ground-truth flow for one volume: per-pixel displacement and validity.
#[derive(Debug, Clone)]
pub struct GroundTruthFlow {
    pub flow: FlowField,
    pub valid: Array2<bool>,
}

impl GeneratedScene {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Analytic ground truth for the volume `[t0, t0 + dt)`.
    ///
    /// A pixel is valid when the rounded path of at least one particle
    /// passes through it during the window; overlapping particles average
    /// their displacements. Pixels are enumerated exactly by walking the
    /// rounding-boundary crossings of each linear trajectory, so every
    /// pixel any event of the window can quantize to is covered.
    pub fn ground_truth(&self, t0: f64, dt: f64) -> GroundTruthFlow {
        let SensorSize { h, w } = self.spec.sensor;
        let mut sum = FlowField::zeros(h, w);
        let mut hits = Array2::<f64>::zeros((h, w));
        for p in &self.spec.particles {
            let t1 = t0 + dt;
            let mut cuts = vec![t0, t1];
            for (pos0, vel) in [(p.x0, p.vx), (p.y0, p.vy)] {
                if vel == 0.0 {
                    continue;
                }
                // Crossings of half-integer lines, where round() flips.
                let (a, b) = (pos0 + vel * t0, pos0 + vel * t1);
                let (lo, hi) = (a.min(b), a.max(b));
                let mut m = (lo - 0.5).ceil();
                while m + 0.5 < hi {
                    if m + 0.5 > lo {
                        cuts.push(((m + 0.5) - pos0) / vel);
                    }
                    m += 1.0;
                }
            }
            cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in cuts.windows(2) {
                let tm = 0.5 * (pair[0] + pair[1]);
                let x = (p.x0 + p.vx * tm).round();
                let y = (p.y0 + p.vy * tm).round();
                if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    continue;
                }
                let (xi, yi) = (x as usize, y as usize);
                sum.data[[0, yi, xi]] += p.vx * dt;
                sum.data[[1, yi, xi]] += p.vy * dt;
                hits[[yi, xi]] += 1.0;
            }
        }
        let mut valid = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                let n = hits[[y, x]];
                if n > 0.0 {
                    valid[[y, x]] = true;
                    sum.data[[0, y, x]] /= n;
                    sum.data[[1, y, x]] /= n;
                }
            }
        }
        GroundTruthFlow { flow: sum, valid }
    }
}

/// Generate the event stream for a scene. Deterministic in `spec.seed`.
pub fn generate(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tagged: Vec<(Event, [f64; 2])> = Vec::new();

    for p in &spec.particles {
        let times = match spec.emission {
            Emission::Uniform => {
                let n = (spec.event_rate * spec.duration).round() as usize;
                (0..n).map(|i| i as f64 / spec.event_rate).collect::<Vec<_>>()
            }
            Emission::Poisson => {
                let mut times = Vec::new();
                let mut t = 0.0;
                loop {
                    let gap: f64 = -rng.gen::<f64>().max(1e-12).ln() / spec.event_rate;
                    t += gap;
                    if t >= spec.duration {
                        break;
                    }
                    times.push(t);
                }
                times
            }
        };
        let mut pol = p.polarity;
        for t in times {
            let fx = p.x0 + p.vx * t;
            let fy = p.y0 + p.vy * t;
            let x = fx.round();
            let y = fy.round();
            if x < 0.0 || y < 0.0 || x >= spec.sensor.w as f64 || y >= spec.sensor.h as f64 {
                continue;
            }
            tagged.push((
                Event {
                    x: x as u16,
                    y: y as u16,
                    t,
                    p: pol,
                },
                [fx, fy],
            ));
            if spec.alternate_polarity {
                pol = pol.flipped();
            }
        }
    }

    tagged.sort_by(|a, b| a.0.t.partial_cmp(&b.0.t).unwrap());
    let raw_positions = spec
        .subpixel_positions
        .then(|| tagged.iter().map(|(_, r)| *r).collect());
    let events = tagged.into_iter().map(|(e, _)| e).collect();
    Ok(GeneratedScene {
        events,
        raw_positions,
        spec: spec.clone(),
    })
}
