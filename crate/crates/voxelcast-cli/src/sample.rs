//! View sampling for dataset generation: camera elevation, object pose and
//! light position draws, plus the swept protocol used for held-out scenes
//! (rotation stepped at a fixed angle while translation and light position
//! interpolate between sampled endpoints).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use voxelcast_core::math::Vec3;
use voxelcast_core::scene::{
    LIGHT_X_RANGE, LIGHT_Y_RANGE, LIGHT_Z_RANGE, TRANSLATION_RANGE,
};
use voxelcast_core::Pose;

use crate::PipelineError;

/// Rotation step of the held-out sweep protocol, degrees.
pub const SWEEP_STEP_DEG: f64 = 10.0;

/// Uniform sampling ranges for one dataset split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingSpec {
    /// Camera elevation range, degrees above the ground plane.
    pub elevation: (f64, f64),
    /// Object rotation about the vertical axis, degrees; the default covers
    /// the front-facing half turn.
    pub rotation: (f64, f64),
    /// Ground-plane translation range, applied independently per axis.
    pub translation: (f64, f64),
    pub light_x: (f64, f64),
    pub light_y: (f64, f64),
    pub light_z: (f64, f64),
    /// Independent views drawn per object (ignored by the sweep protocol,
    /// which derives its own count from the rotation endpoints).
    pub views_per_object: usize,
    /// Base seed; callers derive per-object streams from it.
    pub rng_seed: u64,
}

impl SamplingSpec {
    /// Training ranges: elevation 5–50°.
    pub fn train(views_per_object: usize, rng_seed: u64) -> SamplingSpec {
        SamplingSpec {
            elevation: (5.0, 50.0),
            rotation: (-90.0, 90.0),
            translation: TRANSLATION_RANGE,
            light_x: LIGHT_X_RANGE,
            light_y: LIGHT_Y_RANGE,
            light_z: LIGHT_Z_RANGE,
            views_per_object,
            rng_seed,
        }
    }

    /// Held-out ranges: elevation 15–45°, interior to the training range.
    pub fn test(rng_seed: u64) -> SamplingSpec {
        SamplingSpec { elevation: (15.0, 45.0), ..SamplingSpec::train(0, rng_seed) }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let ordered = |name: &str, r: (f64, f64)| {
            if r.0 <= r.1 {
                Ok(())
            } else {
                Err(PipelineError::Invalid(format!("{name} range {r:?} is reversed")))
            }
        };
        ordered("elevation", self.elevation)?;
        ordered("rotation", self.rotation)?;
        ordered("translation", self.translation)?;
        ordered("light x", self.light_x)?;
        ordered("light y", self.light_y)?;
        ordered("light z", self.light_z)?;
        if !(0.0 <= self.elevation.0 && self.elevation.1 < 90.0) {
            return Err(PipelineError::Invalid(format!(
                "elevation range {:?} outside [0, 90)",
                self.elevation
            )));
        }
        let within = |name: &str, r: (f64, f64), env: (f64, f64)| {
            if env.0 <= r.0 && r.1 <= env.1 {
                Ok(())
            } else {
                Err(PipelineError::Invalid(format!(
                    "{name} range {r:?} outside the scene envelope {env:?}"
                )))
            }
        };
        within("translation", self.translation, TRANSLATION_RANGE)?;
        within("light x", self.light_x, LIGHT_X_RANGE)?;
        within("light y", self.light_y, LIGHT_Y_RANGE)?;
        within("light z", self.light_z, LIGHT_Z_RANGE)?;
        Ok(())
    }
}

/// One sampled view: where the camera sits, how the object is posed and
/// where the light is.
#[derive(Clone, Copy, Debug)]
pub struct ViewSample {
    pub elevation: f64,
    pub pose: Pose,
    pub light: Vec3,
}

fn draw(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

fn draw_light(rng: &mut ChaCha8Rng, spec: &SamplingSpec) -> Vec3 {
    Vec3::new(draw(rng, spec.light_x), draw(rng, spec.light_y), draw(rng, spec.light_z))
}

fn draw_translation(rng: &mut ChaCha8Rng, spec: &SamplingSpec) -> (f64, f64) {
    (draw(rng, spec.translation), draw(rng, spec.translation))
}

/// Independent uniform draws, one per view (training protocol).
pub fn random_views(spec: &SamplingSpec, rng: &mut ChaCha8Rng, count: usize) -> Vec<ViewSample> {
    (0..count)
        .map(|_| ViewSample {
            elevation: draw(rng, spec.elevation),
            pose: Pose {
                rotation_y: draw(rng, spec.rotation),
                translation: draw_translation(rng, spec),
                scale: (1.0, 1.0, 1.0),
            },
            light: draw_light(rng, spec),
        })
        .collect()
}

/// Held-out sweep: a fixed elevation, rotation stepped by
/// [`SWEEP_STEP_DEG`] between two sampled endpoints (at least two steps
/// apart), and translation and light interpolated linearly along the sweep.
pub fn sweep_views(spec: &SamplingSpec, rng: &mut ChaCha8Rng) -> Vec<ViewSample> {
    let elevation = draw(rng, spec.elevation);
    let (start, end) = loop {
        let a = draw(rng, spec.rotation);
        let b = draw(rng, spec.rotation);
        if (a - b).abs() >= 2.0 * SWEEP_STEP_DEG {
            break (a, b);
        }
    };
    let steps = ((end - start).abs() / SWEEP_STEP_DEG).floor() as usize + 1;
    let dir = (end - start).signum();
    let t_a = draw_translation(rng, spec);
    let t_b = draw_translation(rng, spec);
    let l_a = draw_light(rng, spec);
    let l_b = draw_light(rng, spec);
    (0..steps)
        .map(|i| {
            let f = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
            let lerp = |a: f64, b: f64| a + (b - a) * f;
            ViewSample {
                elevation,
                pose: Pose {
                    rotation_y: start + dir * SWEEP_STEP_DEG * i as f64,
                    translation: (lerp(t_a.0, t_b.0), lerp(t_a.1, t_b.1)),
                    scale: (1.0, 1.0, 1.0),
                },
                light: l_a + (l_b - l_a) * f,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn inside(v: f64, r: (f64, f64)) -> bool {
        r.0 <= v && v <= r.1
    }

    #[test]
    fn random_views_stay_inside_their_ranges() {
        let spec = SamplingSpec::train(5, 7);
        spec.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in random_views(&spec, &mut rng, 1000) {
            assert!(inside(v.elevation, spec.elevation));
            assert!(inside(v.pose.rotation_y, spec.rotation));
            assert!(inside(v.pose.translation.0, spec.translation));
            assert!(inside(v.pose.translation.1, spec.translation));
            assert!(inside(v.light.x, spec.light_x));
            assert!(inside(v.light.y, spec.light_y));
            assert!(inside(v.light.z, spec.light_z));
            assert_eq!(v.pose.scale, (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn sweeps_step_rotation_and_interpolate_the_rest() {
        let spec = SamplingSpec::test(7);
        spec.validate().unwrap();
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let views = sweep_views(&spec, &mut rng);
            assert!(views.len() >= 3, "seed {seed}: sweep of {}", views.len());
            let first = &views[0];
            let last = views.last().unwrap();
            for (i, v) in views.iter().enumerate() {
                assert!(inside(v.pose.rotation_y, spec.rotation), "seed {seed} step {i}");
                assert_eq!(v.elevation, first.elevation, "elevation moved mid-sweep");
                if i > 0 {
                    let step = v.pose.rotation_y - views[i - 1].pose.rotation_y;
                    assert!(
                        (step.abs() - SWEEP_STEP_DEG).abs() < 1e-9,
                        "seed {seed}: step {step}"
                    );
                }
                // Interpolated quantities stay within their endpoint spans.
                let between = |x: f64, a: f64, b: f64| inside(x, (a.min(b), a.max(b)));
                assert!(between(v.light.x, first.light.x, last.light.x));
                assert!(between(v.light.y, first.light.y, last.light.y));
                assert!(between(v.pose.translation.0, first.pose.translation.0, last.pose.translation.0));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let spec = SamplingSpec::train(3, 0);
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let va = random_views(&spec, &mut a, 10);
        let vb = random_views(&spec, &mut b, 10);
        for (x, y) in va.iter().zip(&vb) {
            assert_eq!(x.elevation.to_bits(), y.elevation.to_bits());
            assert_eq!(x.pose.rotation_y.to_bits(), y.pose.rotation_y.to_bits());
            assert_eq!(x.light.x.to_bits(), y.light.x.to_bits());
        }
    }

    #[test]
    fn spec_validation_rejects_out_of_envelope_ranges() {
        let mut spec = SamplingSpec::train(1, 0);
        spec.translation = (-0.9, 0.5);
        assert!(spec.validate().is_err());
        let mut spec = SamplingSpec::train(1, 0);
        spec.light_y = (2.5, 3.5);
        assert!(spec.validate().is_err());
        let mut spec = SamplingSpec::train(1, 0);
        spec.elevation = (50.0, 5.0);
        assert!(spec.validate().is_err());
    }
}
