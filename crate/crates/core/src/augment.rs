//! Pixel-shift views of observations and the exhaustive block-structure check.
//!
//! A view translates every frame of an observation by `(dx, dy)` pixels and
//! fills the vacated border with the background value, which is the usual
//! pad-and-crop construction. Inverting the shift restores the observation
//! whenever no sprite was pushed out of frame.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::env::{
    self, decode_observation, enumerate_visible_states, render_visible, Action, EnvError, MdpSpec,
    Observation, VisibleState, BACKGROUND_VALUE, WALL_VALUE,
};
use crate::rng::SplitMix64;

/// Largest grid for which [`check_block_structure`] enumerates every state.
pub const MAX_BLOCK_CHECK_GRID: usize = 8;
const MAX_REPORTED_COLLISIONS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("shift ({dx}, {dy}) exceeds pad {pad}")]
    ShiftExceedsPad { dx: i32, dy: i32, pad: u32 },
    #[error("block check limited to grid_size <= {MAX_BLOCK_CHECK_GRID}, got {0}")]
    TooLarge(usize),
    #[error("view pixels have rank {0}, expected [l, H, W]")]
    BadRank(usize),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentationParams {
    dx: i32,
    dy: i32,
    pad: u32,
}

impl AugmentationParams {
    pub fn new(dx: i32, dy: i32, pad: u32) -> Result<Self, AugmentError> {
        if dx.unsigned_abs() > pad || dy.unsigned_abs() > pad {
            return Err(AugmentError::ShiftExceedsPad { dx, dy, pad });
        }
        Ok(Self { dx, dy, pad })
    }

    pub fn identity(pad: u32) -> Self {
        Self { dx: 0, dy: 0, pad }
    }

    pub fn dx(&self) -> i32 {
        self.dx
    }

    pub fn dy(&self) -> i32 {
        self.dy
    }

    pub fn pad(&self) -> u32 {
        self.pad
    }

    /// Every legal shift for `pad`, `dy` outer and `dx` inner, ascending.
    pub fn all(pad: u32) -> Vec<Self> {
        let p = pad as i32;
        let mut out = Vec::with_capacity(((2 * p + 1) * (2 * p + 1)) as usize);
        for dy in -p..=p {
            for dx in -p..=p {
                out.push(Self { dx, dy, pad });
            }
        }
        out
    }

    fn inverse(self) -> Self {
        Self {
            dx: -self.dx,
            dy: -self.dy,
            pad: self.pad,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub pixels: Tensor,
    pub params: AugmentationParams,
    /// Identifier of the source state, used only by checks and tests.
    pub source_hint: Option<u64>,
}

fn shift_pixels(pixels: &Tensor, dx: i32, dy: i32) -> Result<Tensor, AugmentError> {
    let shape = pixels.shape();
    if shape.len() != 3 {
        return Err(AugmentError::BadRank(shape.len()));
    }
    let (l, h, w) = (shape[0], shape[1] as i64, shape[2] as i64);
    let src = pixels.data();
    let mut out = vec![BACKGROUND_VALUE; src.len()];
    let plane = (h * w) as usize;
    for c in 0..l {
        let base = c * plane;
        for y in 0..h {
            let sy = y - dy as i64;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x - dx as i64;
                if (0..w).contains(&sx) {
                    out[base + (y * w + x) as usize] = src[base + (sy * w + sx) as usize];
                }
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Translates the observation content by `(dx, dy)`; content moves right for
/// positive `dx` and down for positive `dy`.
pub fn render_view(obs: &Observation, params: AugmentationParams) -> Result<View, AugmentError> {
    // Re-validate in case the params were deserialised.
    let params = AugmentationParams::new(params.dx, params.dy, params.pad)?;
    Ok(View {
        pixels: shift_pixels(&obs.pixels, params.dx, params.dy)?,
        params,
        source_hint: None,
    })
}

/// Draws `dx` then `dy` uniformly from `[-pad, pad]` and renders the view.
pub fn sample_view(obs: &Observation, pad: u32, rng: &mut SplitMix64) -> View {
    let params = sample_params(pad, rng);
    render_view(obs, params).expect("sampled params are within pad and observations are rank 3")
}

pub fn sample_params(pad: u32, rng: &mut SplitMix64) -> AugmentationParams {
    let span = 2 * pad as u64 + 1;
    let dx = rng.below(span) as i32 - pad as i32;
    let dy = rng.below(span) as i32 - pad as i32;
    AugmentationParams { dx, dy, pad }
}

/// Inverse shift with the view's own parameters.
pub fn decode(view: &View) -> Observation {
    let inv = view.params.inverse();
    Observation {
        pixels: shift_pixels(&view.pixels, inv.dx, inv.dy).expect("view pixels are rank 3"),
    }
}

/// Recovers the source state of a view without knowing its shift: the wall
/// ring's top-left corner sits at `(margin + dy, margin + dx)`.
pub fn decode_state(spec: &MdpSpec, pixels: &Tensor) -> Result<VisibleState, AugmentError> {
    let side = spec.frame_side();
    let corner = pixels.data()[..side * side]
        .iter()
        .position(|&v| v == WALL_VALUE)
        .ok_or_else(|| EnvError::Undecodable("no wall ring in view".into()))?;
    let dy = (corner / side) as i32 - spec.margin as i32;
    let dx = (corner % side) as i32 - spec.margin as i32;
    let restored = Observation {
        pixels: shift_pixels(pixels, -dx, -dy)?,
    };
    Ok(decode_observation(spec, &restored)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collision {
    pub block_a: usize,
    pub block_b: usize,
    pub params_a: AugmentationParams,
    pub params_b: AugmentationParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub blocks: usize,
    pub views_checked: usize,
    /// No view of one block equals a view of a different block.
    pub disjoint: bool,
    /// Inverting the shift restores the source observation for every view.
    pub decodable: bool,
    pub collision_count: usize,
    /// First collisions found (capped at 1000 entries).
    pub collisions: Vec<Collision>,
}

fn pixel_hash(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Checks that views of distinct observations never coincide and that every
/// view decodes back to its source, over all shifts with `|dx|, |dy| <= pad`.
pub fn check_block_structure_on(observations: &[Observation], pad: u32) -> BlockReport {
    let shifts = AugmentationParams::all(pad);
    let mut by_hash: HashMap<u64, Vec<(usize, AugmentationParams)>> = HashMap::new();
    let mut collisions = Vec::new();
    let mut collision_count = 0usize;
    let mut decodable = true;
    let mut views_checked = 0usize;

    for (block, obs) in observations.iter().enumerate() {
        for &p in &shifts {
            let view = render_view(obs, p).expect("shift within pad");
            views_checked += 1;
            if decode(&view).pixels != obs.pixels {
                decodable = false;
            }
            let bucket = by_hash.entry(pixel_hash(&view.pixels)).or_default();
            let mut clashed = None;
            for &(other, q) in bucket.iter() {
                if other == block {
                    continue;
                }
                let other_view = render_view(&observations[other], q).expect("shift within pad");
                if other_view.pixels == view.pixels {
                    clashed = Some((other, q));
                    break;
                }
            }
            if let Some((other, q)) = clashed {
                collision_count += 1;
                if collisions.len() < MAX_REPORTED_COLLISIONS {
                    collisions.push(Collision {
                        block_a: other,
                        block_b: block,
                        params_a: q,
                        params_b: p,
                    });
                }
            }
            bucket.push((block, p));
        }
    }
    BlockReport {
        blocks: observations.len(),
        views_checked,
        disjoint: collision_count == 0,
        decodable,
        collision_count,
        collisions,
    }
}

fn block_guard(spec: &MdpSpec) -> Result<(), AugmentError> {
    spec.validate()?;
    if spec.grid_size > MAX_BLOCK_CHECK_GRID {
        return Err(AugmentError::TooLarge(spec.grid_size));
    }
    Ok(())
}

/// Exhaustive block-structure check over every reachable stacked-frame
/// configuration of the environment.
pub fn check_block_structure(spec: &MdpSpec, pad: u32) -> Result<BlockReport, AugmentError> {
    block_guard(spec)?;
    let observations: Vec<Observation> = enumerate_visible_states(spec)?
        .iter()
        .map(|v| render_visible(spec, v))
        .collect();
    Ok(check_block_structure_on(&observations, pad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConsistencyReport {
    pub cases: usize,
    pub mismatches: usize,
}

/// For every reachable configuration, action, respawn column and shift,
/// stepping the state decoded from a view gives exactly the successor of the
/// original state.
pub fn check_view_consistent_dynamics(
    spec: &MdpSpec,
    pad: u32,
) -> Result<DynamicsConsistencyReport, AugmentError> {
    block_guard(spec)?;
    let shifts = AugmentationParams::all(pad);
    let mut cases = 0;
    let mut mismatches = 0;
    for visible in enumerate_visible_states(spec)? {
        let state = env::state_from_visible(&visible, 0);
        let obs = render_visible(spec, &visible);
        for &p in &shifts {
            let view = render_view(&obs, p)?;
            let decoded = env::state_from_visible(&decode_state(spec, &view.pixels)?, state.step_count);
            let decoded_known = decode_observation(spec, &decode(&view))?;
            for action in Action::ALL {
                for col in 0..spec.grid_size as u8 {
                    cases += 1;
                    let truth = env::transition(spec, &state, action, || col)?;
                    let via_view = env::transition(spec, &decoded, action, || col)?;
                    let via_known = env::transition(
                        spec,
                        &env::state_from_visible(&decoded_known, state.step_count),
                        action,
                        || col,
                    )?;
                    if truth != via_view || truth != via_known {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    Ok(DynamicsConsistencyReport { cases, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{initial_state, render};

    fn spec8() -> MdpSpec {
        MdpSpec {
            grid_size: 8,
            ..MdpSpec::default()
        }
    }

    #[test]
    fn identity_view() {
        let s = spec8();
        let obs = render(&s, &initial_state(&s, 3));
        let v = render_view(&obs, AugmentationParams::identity(4)).unwrap();
        assert_eq!(v.pixels, obs.pixels);
    }

    #[test]
    fn shift_then_decode_restores() {
        let s = spec8();
        let obs = render(&s, &initial_state(&s, 3));
        let v = render_view(&obs, AugmentationParams::new(1, 0, 4).unwrap()).unwrap();
        assert_ne!(v.pixels, obs.pixels);
        assert_eq!(decode(&v), obs);
        let v = render_view(&obs, AugmentationParams::new(-4, 3, 4).unwrap()).unwrap();
        assert_eq!(decode(&v), obs);
        assert_eq!(decode_state(&s, &v.pixels).unwrap(), initial_state(&s, 3).visible());
    }

    #[test]
    fn shift_moves_content_right_and_down() {
        let pixels = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let obs = Observation { pixels };
        let v = render_view(&obs, AugmentationParams::new(1, 1, 1).unwrap()).unwrap();
        assert_eq!(v.pixels.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn shift_beyond_pad_is_rejected() {
        assert_eq!(
            AugmentationParams::new(5, 0, 4).unwrap_err(),
            AugmentError::ShiftExceedsPad { dx: 5, dy: 0, pad: 4 }
        );
        assert!(AugmentationParams::new(0, -2, 1).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_pad_zero_is_identity() {
        let s = spec8();
        let obs = render(&s, &initial_state(&s, 1));
        let a = sample_view(&obs, 4, &mut SplitMix64::new(5));
        let b = sample_view(&obs, 4, &mut SplitMix64::new(5));
        assert_eq!(a, b);
        let mut rng = SplitMix64::new(6);
        for _ in 0..50 {
            let v = sample_view(&obs, 0, &mut rng);
            assert_eq!(v.pixels, obs.pixels);
        }
    }

    #[test]
    fn sampling_is_uniform_over_shifts() {
        let pad = 2u32;
        let draws = 10_000usize;
        let mut rng = SplitMix64::new(17);
        let mut counts: HashMap<(i32, i32), usize> = HashMap::new();
        for _ in 0..draws {
            let p = sample_params(pad, &mut rng);
            *counts.entry((p.dx(), p.dy())).or_default() += 1;
        }
        let cells = 25.0;
        let expected = draws as f64 / cells;
        let sigma = (draws as f64 * (1.0 / cells) * (1.0 - 1.0 / cells)).sqrt();
        assert_eq!(counts.len(), 25);
        for (k, c) in counts {
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "shift {k:?} drawn {c} times, expected {expected} +- {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn pad_zero_block_check_is_trivial() {
        let s = MdpSpec {
            grid_size: 4,
            ..MdpSpec::default()
        };
        let r = check_block_structure(&s, 0).unwrap();
        assert!(r.disjoint && r.decodable);
        assert_eq!(r.views_checked, r.blocks);
    }

    #[test]
    fn all_black_states_collide() {
        let black = Observation {
            pixels: Tensor::zeros(&[2, 6, 6]),
        };
        let r = check_block_structure_on(&[black.clone(), black], 1);
        assert!(!r.disjoint);
        assert!(r.decodable);
        assert!(!r.collisions.is_empty());
        assert_eq!(r.collisions[0].block_a, 0);
        assert_eq!(r.collisions[0].block_b, 1);
    }

    #[test]
    fn shifting_without_margin_breaks_the_blocks() {
        let s = MdpSpec {
            grid_size: 4,
            margin: 0,
            ..MdpSpec::default()
        };
        let r = check_block_structure(&s, 1).unwrap();
        assert!(!r.decodable);
    }

    #[test]
    fn small_grid_blocks_and_dynamics() {
        let s = MdpSpec {
            grid_size: 4,
            margin: 2,
            ..MdpSpec::default()
        };
        let r = check_block_structure(&s, 2).unwrap();
        assert!(r.disjoint && r.decodable, "{r:?}");
        let d = check_view_consistent_dynamics(&s, 2).unwrap();
        assert!(d.cases > 0);
        assert_eq!(d.mismatches, 0);
    }

    #[test]
    fn block_check_guard() {
        assert!(matches!(
            check_block_structure(&MdpSpec::default(), 4),
            Err(AugmentError::TooLarge(16))
        ));
    }
}
