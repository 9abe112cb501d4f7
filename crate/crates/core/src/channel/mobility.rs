use std::f64::consts::PI;

use rand::Rng;

use super::SceneConfig;

/// UE kinematic state; the array sits at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UEState {
    pub position: [f64; 2],
    pub heading: f64,
    pub speed: f64,
}

impl UEState {
    pub fn distance(&self) -> f64 {
        self.position[0].hypot(self.position[1])
    }
}

/// Uniform position in the spawn annulus, uniform heading.
pub fn spawn_ue<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> UEState {
    let (a, b) = (cfg.inner_radius.powi(2), cfg.outer_radius.powi(2));
    let r = rng.random_range(a..b).sqrt();
    let phi = rng.random_range(-PI..PI);
    UEState {
        position: [r * phi.cos(), r * phi.sin()],
        heading: rng.random_range(0.0..2.0 * PI),
        speed: cfg.ue_speed,
    }
}

pub fn redraw_heading<R: Rng + ?Sized>(ue: &UEState, rng: &mut R) -> UEState {
    UEState {
        heading: rng.random_range(0.0..2.0 * PI),
        ..*ue
    }
}

/// Straight-line motion for `dt` seconds at the current heading, mirrored
/// back into the annulus when a boundary is crossed.
pub fn advance(ue: &UEState, dt: f64, cfg: &SceneConfig) -> UEState {
    let step = ue.speed * dt;
    let mut pos = [
        ue.position[0] + step * ue.heading.cos(),
        ue.position[1] + step * ue.heading.sin(),
    ];
    let mut heading = ue.heading;
    for _ in 0..8 {
        let r = pos[0].hypot(pos[1]);
        let target = if r > cfg.outer_radius {
            2.0 * cfg.outer_radius - r
        } else if r < cfg.inner_radius {
            2.0 * cfg.inner_radius - r
        } else {
            break;
        };
        let (nx, ny) = if r > 0.0 {
            (pos[0] / r, pos[1] / r)
        } else {
            (heading.cos(), heading.sin())
        };
        let target = target.clamp(cfg.inner_radius, cfg.outer_radius);
        pos = [nx * target, ny * target];
        let (vx, vy) = (heading.cos(), heading.sin());
        let dot = vx * nx + vy * ny;
        heading = (vy - 2.0 * dot * ny).atan2(vx - 2.0 * dot * nx);
    }
    UEState {
        position: pos,
        heading,
        speed: ue.speed,
    }
}

/// Slot-boundary move: fresh heading, then `dt` seconds of motion.
pub fn step_ue<R: Rng + ?Sized>(ue: &UEState, dt: f64, cfg: &SceneConfig, rng: &mut R) -> UEState {
    advance(&redraw_heading(ue, rng), dt, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stationary_ue_stays_put() {
        let cfg = SceneConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ue = UEState {
            position: [50.0, 10.0],
            heading: 1.0,
            speed: 0.0,
        };
        let next = step_ue(&ue, 0.16, &cfg, &mut rng);
        assert_eq!(next.position, ue.position);
    }

    #[test]
    fn slot_displacement() {
        let cfg = SceneConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ue = UEState {
            position: [100.0, 0.0],
            heading: 0.0,
            speed: 5.0,
        };
        let next = step_ue(&ue, 0.16, &cfg, &mut rng);
        let d = (next.position[0] - 100.0).hypot(next.position[1]);
        assert!((d - 0.8).abs() < 1e-12, "{d}");
    }

    #[test]
    fn intermediate_positions_interpolate() {
        let cfg = SceneConfig::desk();
        let ue = UEState {
            position: [80.0, -30.0],
            heading: 2.1,
            speed: 20.0,
        };
        let end = advance(&ue, 0.16, &cfg);
        for tbar in [0.1, 0.5, 0.9] {
            let mid = advance(&ue, tbar * 0.16, &cfg);
            for k in 0..2 {
                let lerp = ue.position[k] + tbar * (end.position[k] - ue.position[k]);
                assert!((mid.position[k] - lerp).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reflection_keeps_ue_in_annulus() {
        let cfg = SceneConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ue = UEState {
            position: [199.5, 0.0],
            heading: 0.0,
            speed: 20.0,
        };
        ue = advance(&ue, 0.16, &cfg);
        assert!(ue.distance() <= cfg.outer_radius);
        assert!(ue.heading.cos() < 0.0, "heading should point back inwards");
        for _ in 0..2000 {
            ue = step_ue(&ue, 0.16, &cfg, &mut rng);
            let r = ue.distance();
            assert!(r >= cfg.inner_radius - 1e-9 && r <= cfg.outer_radius + 1e-9, "{r}");
        }
    }
}
