//! Deterministic generator of moving-shapes episodes.
//!
//! An episode is a T-frame RGB raster of simple shapes on a black background,
//! a referring expression over (shape, color, motion), and per-frame referent
//! masks and boxes. In motion-discriminative mode at least one distractor
//! shares the referent's shape and color and differs only in motion, so
//! appearance alone cannot solve the episode.

use crate::blocks::{self, linear};
use crate::params::{Binder, Init};
use crate::tensor::{Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{self, Read, Write};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Bar,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Static,
}

pub const ALL_SHAPES: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Bar];
pub const ALL_COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
pub const ALL_MOTIONS: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Static];

/// Width of the one-hot expression encoding: 3 shapes + 3 colors + 5 motions.
pub const EXPR_DIM: usize = 11;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ExpressionSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
}

impl ExpressionSpec {
    pub fn onehot(&self) -> [f64; EXPR_DIM] {
        let mut v = [0.0; EXPR_DIM];
        v[self.shape as usize] = 1.0;
        v[3 + self.color as usize] = 1.0;
        v[6 + self.motion as usize] = 1.0;
        v
    }

    fn indices(&self) -> [u32; 3] {
        [self.shape as u32, self.color as u32, self.motion as u32]
    }

    fn from_indices(s: u32, c: u32, m: u32) -> io::Result<ExpressionSpec> {
        let shape = *ALL_SHAPES
            .get(s as usize)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad shape index {s}")))?;
        let color = *ALL_COLORS
            .get(c as usize)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad color index {c}")))?;
        let motion = *ALL_MOTIONS
            .get(m as usize)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad motion index {m}")))?;
        Ok(ExpressionSpec { shape, color, motion })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Appearance,
    MotionDiscriminative,
}

#[derive(Copy, Clone, Debug)]
struct SceneObject {
    shape: Shape,
    color: Color,
    motion: Motion,
    /// Top-left corner at frame 0, in pixels.
    start: (i64, i64),
}

impl Motion {
    fn velocity(&self) -> (i64, i64) {
        match self {
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
            Motion::Static => (0, 0),
        }
    }
}

impl Shape {
    /// Bounding extent (w, h) of the footprint.
    fn extent(&self) -> (usize, usize) {
        match self {
            Shape::Square => (5, 5),
            Shape::Disc => (6, 6),
            Shape::Bar => (7, 3),
        }
    }

    /// Footprint offsets relative to the top-left corner.
    fn footprint(&self) -> Vec<(usize, usize)> {
        match self {
            Shape::Square => (0..5).flat_map(|y| (0..5).map(move |x| (x, y))).collect(),
            Shape::Disc => {
                let mut px = Vec::new();
                for y in 0..6 {
                    for x in 0..6 {
                        let dx = x as f64 - 2.5;
                        let dy = y as f64 - 2.5;
                        if dx * dx + dy * dy <= 2.7 * 2.7 {
                            px.push((x, y));
                        }
                    }
                }
                px
            }
            Shape::Bar => (0..3).flat_map(|y| (0..7).map(move |x| (x, y))).collect(),
        }
    }
}

#[derive(Clone)]
pub struct Episode {
    /// `[T,H,W,3]` row-major, values in {0,1}.
    pub frames: Vec<f64>,
    /// `[T,H,W]` binary referent masks.
    pub gt_masks: Vec<f64>,
    /// `[T,4]` normalized (cx,cy,w,h), tight around the masks.
    pub gt_boxes: Vec<f64>,
    pub expression: ExpressionSpec,
    pub seed: u64,
    pub frames_len: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub difficulty: Difficulty,
    /// (shape, color, motion) per scene object, referent first. Not part of
    /// the serialized format; kept for structural checks.
    pub object_specs: Vec<(Shape, Color, Motion)>,
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("no feasible placement for {0} objects after 100 attempts")]
    InfeasiblePlacement(usize),
}

fn position_at(obj: &SceneObject, t: usize, width: usize, height: usize) -> (i64, i64) {
    let (vx, vy) = obj.motion.velocity();
    let (w, h) = obj.shape.extent();
    // Constant velocity with border clamping; feasible placements never
    // actually clamp.
    let x = (obj.start.0 + vx * t as i64).clamp(0, (width - w) as i64);
    let y = (obj.start.1 + vy * t as i64).clamp(0, (height - h) as i64);
    (x, y)
}

/// Start position whose full trajectory stays in frame; `None` when the
/// shape cannot travel that far in this frame size.
fn sample_start(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    motion: Motion,
    t: usize,
    width: usize,
    height: usize,
) -> Option<(i64, i64)> {
    let (w, h) = shape.extent();
    let (vx, vy) = motion.velocity();
    let travel = (t - 1) as i64;
    let (mut x_lo, mut x_hi) = (0i64, (width - w) as i64);
    let (mut y_lo, mut y_hi) = (0i64, (height - h) as i64);
    if vx > 0 {
        x_hi -= travel;
    } else if vx < 0 {
        x_lo += travel;
    }
    if vy > 0 {
        y_hi -= travel;
    } else if vy < 0 {
        y_lo += travel;
    }
    if x_lo > x_hi || y_lo > y_hi {
        return None;
    }
    Some((rng.gen_range(x_lo..=x_hi), rng.gen_range(y_lo..=y_hi)))
}

fn boxes_overlap(a: (i64, i64, usize, usize), b: (i64, i64, usize, usize)) -> bool {
    let (ax, ay, aw, ah) = a;
    let (bx, by, bw, bh) = b;
    ax < bx + bw as i64 && bx < ax + aw as i64 && ay < by + bh as i64 && by < ay + ah as i64
}

fn sample_distinct_appearance(rng: &mut ChaCha8Rng, avoid: (Shape, Color)) -> (Shape, Color) {
    loop {
        let s = ALL_SHAPES[rng.gen_range(0..3)];
        let c = ALL_COLORS[rng.gen_range(0..3)];
        if (s, c) != avoid {
            return (s, c);
        }
    }
}

fn sample_motion_except(rng: &mut ChaCha8Rng, avoid: Motion) -> Motion {
    loop {
        let m = ALL_MOTIONS[rng.gen_range(0..5)];
        if m != avoid {
            return m;
        }
    }
}

/// Deterministic episode from a seed. Exactly one object satisfies the
/// expression; all objects stay fully in frame and never overlap.
pub fn generate_episode(
    seed: u64,
    difficulty: Difficulty,
    t: usize,
    height: usize,
    width: usize,
    n_objects: usize,
) -> Result<Episode, GenerateError> {
    assert!(n_objects >= 2, "need at least two objects, got {}", n_objects);
    assert!(t >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _attempt in 0..100 {
        let referent_spec = ExpressionSpec {
            shape: ALL_SHAPES[rng.gen_range(0..3)],
            color: ALL_COLORS[rng.gen_range(0..3)],
            motion: ALL_MOTIONS[rng.gen_range(0..5)],
        };
        let mut specs: Vec<(Shape, Color, Motion)> =
            vec![(referent_spec.shape, referent_spec.color, referent_spec.motion)];
        match difficulty {
            Difficulty::MotionDiscriminative => {
                let twin_motion = sample_motion_except(&mut rng, referent_spec.motion);
                specs.push((referent_spec.shape, referent_spec.color, twin_motion));
                for _ in 2..n_objects {
                    let (s, c) = sample_distinct_appearance(&mut rng, (referent_spec.shape, referent_spec.color));
                    specs.push((s, c, ALL_MOTIONS[rng.gen_range(0..5)]));
                }
            }
            Difficulty::Appearance => {
                for _ in 1..n_objects {
                    let (s, c) = sample_distinct_appearance(&mut rng, (referent_spec.shape, referent_spec.color));
                    specs.push((s, c, ALL_MOTIONS[rng.gen_range(0..5)]));
                }
            }
        }

        // Place objects with non-overlap across every frame.
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
        let mut ok = true;
        for &(shape, color, motion) in &specs {
            let mut placed = false;
            for _ in 0..100 {
                let Some(start) = sample_start(&mut rng, shape, motion, t, width, height) else {
                    break;
                };
                let candidate = SceneObject { shape, color, motion, start };
                let collides = (0..t).any(|ti| {
                    let (cx, cy) = position_at(&candidate, ti, width, height);
                    let (cw, ch) = candidate.shape.extent();
                    objects.iter().any(|o| {
                        let (ox, oy) = position_at(o, ti, width, height);
                        let (ow, oh) = o.shape.extent();
                        boxes_overlap((cx, cy, cw, ch), (ox, oy, ow, oh))
                    })
                });
                if !collides {
                    objects.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }

        // Exactly one object may satisfy the expression jointly.
        let matches = objects
            .iter()
            .filter(|o| {
                o.shape == referent_spec.shape
                    && o.color == referent_spec.color
                    && o.motion == referent_spec.motion
            })
            .count();
        if matches != 1 {
            continue;
        }

        return Ok(rasterize(seed, difficulty, t, height, width, referent_spec, &objects));
    }
    Err(GenerateError::InfeasiblePlacement(n_objects))
}

fn rasterize(
    seed: u64,
    difficulty: Difficulty,
    t: usize,
    height: usize,
    width: usize,
    expression: ExpressionSpec,
    objects: &[SceneObject],
) -> Episode {
    let mut frames = vec![0.0; t * height * width * 3];
    let mut gt_masks = vec![0.0; t * height * width];
    let mut gt_boxes = vec![0.0; t * 4];
    for ti in 0..t {
        for (oi, obj) in objects.iter().enumerate() {
            let (x, y) = position_at(obj, ti, width, height);
            let ch = obj.color as usize;
            for &(fx, fy) in obj.shape.footprint().iter() {
                let px = (x as usize + fx, y as usize + fy);
                frames[((ti * height + px.1) * width + px.0) * 3 + ch] = 1.0;
                if oi == 0 {
                    gt_masks[(ti * height + px.1) * width + px.0] = 1.0;
                }
            }
        }
        // Tight box around the referent mask.
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for yy in 0..height {
            for xx in 0..width {
                if gt_masks[(ti * height + yy) * width + xx] > 0.5 {
                    x0 = x0.min(xx);
                    y0 = y0.min(yy);
                    x1 = x1.max(xx);
                    y1 = y1.max(yy);
                }
            }
        }
        gt_boxes[ti * 4] = (x0 + x1 + 1) as f64 / 2.0 / width as f64;
        gt_boxes[ti * 4 + 1] = (y0 + y1 + 1) as f64 / 2.0 / height as f64;
        gt_boxes[ti * 4 + 2] = (x1 + 1 - x0) as f64 / width as f64;
        gt_boxes[ti * 4 + 3] = (y1 + 1 - y0) as f64 / height as f64;
    }
    Episode {
        frames,
        gt_masks,
        gt_boxes,
        expression,
        seed,
        frames_len: t,
        height,
        width,
        n_objects: objects.len(),
        difficulty,
        object_specs: objects.iter().map(|o| (o.shape, o.color, o.motion)).collect(),
    }
}

// ── Expression encoding and feature fusion ─────────────────────────────

/// One-hot concatenation projected to model width by a learned matrix.
pub fn encode_expression(t: &mut Tape, spec: &ExpressionSpec, projection: TensorId) -> TensorId {
    let c = t.shape(projection)[1];
    assert_eq!(
        t.shape(projection)[0],
        EXPR_DIM,
        "expression projection must be [{},C], got {:?}",
        EXPR_DIM,
        t.shape(projection)
    );
    let onehot = t.constant(spec.onehot().to_vec(), &[1, EXPR_DIM]);
    let projected = t.matmul(onehot, projection);
    t.reshape(projected, &[c])
}

#[derive(Clone, Copy)]
pub struct FusionParams {
    /// `[patch*patch*3, C]` patch embedding.
    pub patch_w: TensorId,
    pub patch_b: TensorId,
    /// `[C,C]` + `[C]` sentence-feature gate projection.
    pub gate_w: TensorId,
    pub gate_b: TensorId,
}

impl FusionParams {
    pub fn bind(b: &mut Binder, prefix: &str, patch: usize, c: usize) -> FusionParams {
        FusionParams {
            patch_w: b.param(&format!("{prefix}.patch_w"), &[patch * patch * 3, c], Init::XavierUniform),
            patch_b: b.param(&format!("{prefix}.patch_b"), &[c], Init::Zeros),
            gate_w: b.param(&format!("{prefix}.gate_w"), &[c, c], Init::XavierUniform),
            gate_b: b.param(&format!("{prefix}.gate_b"), &[c], Init::Zeros),
        }
    }
}

/// Non-overlapping patch pixels in (dy, dx, channel) order, one row per
/// (frame, patch) pair: `[T*P, patch*patch*3]`.
pub fn extract_patches(frames: &[f64], t: usize, height: usize, width: usize, patch: usize) -> Vec<f64> {
    assert_eq!(height % patch, 0);
    assert_eq!(width % patch, 0);
    let (fh, fw) = (height / patch, width / patch);
    let k = patch * patch * 3;
    let mut out = vec![0.0; t * fh * fw * k];
    for ti in 0..t {
        for py in 0..fh {
            for px in 0..fw {
                let row = (ti * fh + py) * fw + px;
                let mut i = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..3 {
                            out[row * k + i] =
                                frames[((ti * height + py * patch + dy) * width + px * patch + dx) * 3 + ch];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch embedding of each frame, modulated elementwise by a sigmoid gate of
/// the sentence feature, then position-encoded: `[T,P,C]`.
pub fn fuse_features(
    t: &mut Tape,
    frames: &[f64],
    frames_len: usize,
    height: usize,
    width: usize,
    patch: usize,
    sentence_feature: TensorId,
    p: &FusionParams,
) -> TensorId {
    let (fh, fw) = (height / patch, width / patch);
    let positions = fh * fw;
    let c = t.shape(p.patch_b)[0];
    let patches = extract_patches(frames, frames_len, height, width, patch);
    let patches_t = t.constant(patches, &[frames_len * positions, patch * patch * 3]);
    let emb = linear(t, patches_t, p.patch_w, p.patch_b);
    let gate_pre = linear(t, sentence_feature, p.gate_w, p.gate_b);
    let gate = t.sigmoid(gate_pre);
    let gated = t.mul(emb, gate);
    let shaped = t.reshape(gated, &[frames_len, positions, c]);
    let pe = blocks::sinusoidal_position_encoding_2d(fh, fw, c);
    let pe_t = t.constant(pe, &[positions, c]);
    t.add(shaped, pe_t)
}

// ── Serialization ───────────────────────────────────────────────────────

pub const EPISODE_MAGIC: &[u8; 4] = b"TCDE";
pub const EPISODE_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Header (magic, version, T, H, W, n_objects) then frames as f64, masks as
/// u8, boxes as f64, the expression as three u32 indices, and the seed.
pub fn write_episode(w: &mut impl Write, ep: &Episode) -> io::Result<()> {
    w.write_all(EPISODE_MAGIC)?;
    put_u32(w, EPISODE_VERSION)?;
    put_u32(w, ep.frames_len as u32)?;
    put_u32(w, ep.height as u32)?;
    put_u32(w, ep.width as u32)?;
    put_u32(w, ep.n_objects as u32)?;
    put_f64s(w, &ep.frames)?;
    let mask_bytes: Vec<u8> = ep.gt_masks.iter().map(|&v| if v > 0.5 { 1u8 } else { 0u8 }).collect();
    w.write_all(&mask_bytes)?;
    put_f64s(w, &ep.gt_boxes)?;
    let [s, c, m] = ep.expression.indices();
    put_u32(w, s)?;
    put_u32(w, c)?;
    put_u32(w, m)?;
    w.write_all(&ep.seed.to_le_bytes())?;
    Ok(())
}

/// Reads the format written by [`write_episode`]. The difficulty tag is not
/// stored; callers that need it track it alongside the stream.
pub fn read_episode(r: &mut impl Read) -> io::Result<Episode> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EPISODE_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad episode magic"));
    }
    let version = get_u32(r)?;
    if version != EPISODE_VERSION {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unsupported episode version {version}")));
    }
    let t = get_u32(r)? as usize;
    let h = get_u32(r)? as usize;
    let w = get_u32(r)? as usize;
    let n_objects = get_u32(r)? as usize;
    let frames = get_f64s(r, t * h * w * 3)?;
    let mut mask_bytes = vec![0u8; t * h * w];
    r.read_exact(&mut mask_bytes)?;
    let gt_masks: Vec<f64> = mask_bytes.iter().map(|&b| b as f64).collect();
    let gt_boxes = get_f64s(r, t * 4)?;
    let s = get_u32(r)?;
    let c = get_u32(r)?;
    let m = get_u32(r)?;
    let expression = ExpressionSpec::from_indices(s, c, m)?;
    let mut seed_bytes = [0u8; 8];
    r.read_exact(&mut seed_bytes)?;
    Ok(Episode {
        frames,
        gt_masks,
        gt_boxes,
        expression,
        seed: u64::from_le_bytes(seed_bytes),
        frames_len: t,
        height: h,
        width: w,
        n_objects,
        difficulty: Difficulty::Appearance,
        object_specs: Vec::new(),
    })
}

pub fn episode_to_bytes(ep: &Episode) -> Vec<u8> {
    let mut out = Vec::new();
    write_episode(&mut out, ep).expect("in-memory episode serialization cannot fail");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn centroid_x(mask: &[f64], h: usize, w: usize) -> f64 {
        let mut sx = 0.0;
        let mut count = 0.0;
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] > 0.5 {
                    sx += x as f64;
                    count += 1.0;
                }
            }
        }
        sx / count
    }

    fn gen_with_motion(motion: Motion, difficulty: Difficulty) -> Episode {
        for seed in 0..10_000 {
            let ep = generate_episode(seed, difficulty, 6, 16, 16, 3).unwrap();
            if ep.expression.motion == motion {
                return ep;
            }
        }
        panic!("no episode with motion {:?} found", motion);
    }

    #[test]
    fn rightward_referent_strictly_increases_centroid_x() {
        let ep = gen_with_motion(Motion::Right, Difficulty::MotionDiscriminative);
        let hw = ep.height * ep.width;
        let mut prev = f64::NEG_INFINITY;
        for ti in 0..ep.frames_len {
            let cx = centroid_x(&ep.gt_masks[ti * hw..(ti + 1) * hw], ep.height, ep.width);
            assert!(cx > prev, "centroid x {} not strictly increasing past {}", cx, prev);
            prev = cx;
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_episode(7, Difficulty::MotionDiscriminative, 6, 16, 16, 3).unwrap();
        let b = generate_episode(7, Difficulty::MotionDiscriminative, 6, 16, 16, 3).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.gt_masks, b.gt_masks);
        assert_eq!(a.gt_boxes, b.gt_boxes);
        assert_eq!(a.expression, b.expression);
    }

    #[test]
    fn exactly_one_object_satisfies_expression() {
        for seed in 0..30 {
            for difficulty in [Difficulty::Appearance, Difficulty::MotionDiscriminative] {
                let ep = generate_episode(seed, difficulty, 6, 16, 16, 3).unwrap();
                let matches = ep
                    .object_specs
                    .iter()
                    .filter(|&&(s, c, m)| {
                        s == ep.expression.shape && c == ep.expression.color && m == ep.expression.motion
                    })
                    .count();
                assert_eq!(matches, 1, "seed {} {:?}", seed, difficulty);
                let hw = ep.height * ep.width;
                for ti in 0..ep.frames_len {
                    let count: f64 = ep.gt_masks[ti * hw..(ti + 1) * hw].iter().sum();
                    assert!(count > 0.0, "empty referent mask at frame {}", ti);
                }
            }
        }
    }

    #[test]
    fn motion_discriminative_mode_has_appearance_tie() {
        for seed in 0..30 {
            let ep = generate_episode(seed, Difficulty::MotionDiscriminative, 6, 16, 16, 3).unwrap();
            let ties = ep
                .object_specs
                .iter()
                .filter(|&&(s, c, _)| s == ep.expression.shape && c == ep.expression.color)
                .count();
            assert!(ties >= 2, "appearance alone must not identify the referent (seed {})", seed);
        }
    }

    #[test]
    fn masks_and_boxes_agree() {
        for seed in 0..20 {
            let ep = generate_episode(seed, Difficulty::Appearance, 6, 16, 16, 3).unwrap();
            let hw = ep.height * ep.width;
            for ti in 0..ep.frames_len {
                let mask = &ep.gt_masks[ti * hw..(ti + 1) * hw];
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
                for y in 0..ep.height {
                    for x in 0..ep.width {
                        if mask[y * ep.width + x] > 0.5 {
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x);
                            y1 = y1.max(y);
                        }
                    }
                }
                let b = &ep.gt_boxes[ti * 4..(ti + 1) * 4];
                assert_eq!(b[0], (x0 + x1 + 1) as f64 / 2.0 / ep.width as f64);
                assert_eq!(b[1], (y0 + y1 + 1) as f64 / 2.0 / ep.height as f64);
                assert_eq!(b[2], (x1 + 1 - x0) as f64 / ep.width as f64);
                assert_eq!(b[3], (y1 + 1 - y0) as f64 / ep.height as f64);
            }
        }
    }

    #[test]
    fn objects_never_overlap() {
        for seed in 0..20 {
            let ep = generate_episode(seed, Difficulty::MotionDiscriminative, 6, 16, 16, 3).unwrap();
            let hw = ep.height * ep.width;
            // No pixel may carry two colors.
            for ti in 0..ep.frames_len {
                for i in 0..hw {
                    let lit: usize =
                        (0..3).filter(|&ch| ep.frames[(ti * hw + i) * 3 + ch] > 0.5).count();
                    assert!(lit <= 1, "overlapping objects at frame {} pixel {}", ti, i);
                }
            }
        }
    }

    #[test]
    fn infeasible_placement_errors_out() {
        // A 16x16 frame cannot hold eight 6x6 discs without overlap.
        let result = generate_episode(0, Difficulty::Appearance, 6, 16, 16, 8);
        assert!(result.is_err());
    }

    #[test]
    fn expression_onehots_are_injective() {
        let mut seen = std::collections::HashSet::new();
        for s in ALL_SHAPES {
            for c in ALL_COLORS {
                for m in ALL_MOTIONS {
                    let spec = ExpressionSpec { shape: s, color: c, motion: m };
                    let key: Vec<u64> = spec.onehot().iter().map(|v| v.to_bits()).collect();
                    assert!(seen.insert(key), "duplicate encoding for {:?}", spec);
                }
            }
        }
        assert_eq!(seen.len(), 45);
    }

    #[test]
    fn zero_projection_gives_zero_feature() {
        let mut t = Tape::new();
        let proj = t.constant(vec![0.0; EXPR_DIM * 8], &[EXPR_DIM, 8]);
        let spec = ExpressionSpec { shape: Shape::Disc, color: Color::Green, motion: Motion::Up };
        let fs = encode_expression(&mut t, &spec, proj);
        assert!(t.data(fs).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gate_reduces_to_visual_embedding() {
        let (c, patch) = (8usize, 2usize);
        let ep = generate_episode(3, Difficulty::Appearance, 2, 8, 8, 2).unwrap();
        let mut store = ParamStore::new(70);
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, &mut store);
        let mut p = FusionParams::bind(&mut b, "fusion", patch, c);
        // Saturate the gate: bias +20 drives sigmoid to 1.
        let big_bias = t.constant(vec![20.0; c], &[c]);
        let zero_w = t.constant(vec![0.0; c * c], &[c, c]);
        p.gate_w = zero_w;
        p.gate_b = big_bias;
        let fs = t.constant(vec![0.3; c], &[c]);
        let fused = fuse_features(&mut t, &ep.frames, ep.frames_len, ep.height, ep.width, patch, fs, &p);

        // Reference: raw embedding plus position encoding, no gate.
        let patches = extract_patches(&ep.frames, ep.frames_len, ep.height, ep.width, patch);
        let (fh, fw) = (ep.height / patch, ep.width / patch);
        let positions = fh * fw;
        let patches_t = t.constant(patches, &[ep.frames_len * positions, patch * patch * 3]);
        let emb = linear(&mut t, patches_t, p.patch_w, p.patch_b);
        let shaped = t.reshape(emb, &[ep.frames_len, positions, c]);
        let pe = blocks::sinusoidal_position_encoding_2d(fh, fw, c);
        let pe_t = t.constant(pe, &[positions, c]);
        let expected = t.add(shaped, pe_t);
        for (a, b) in t.data(fused).iter().zip(t.data(expected)) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn black_frames_zero_bias_give_pure_position_encoding() {
        let (c, patch, frames_len, h, w) = (8usize, 2usize, 2usize, 8usize, 8usize);
        let mut store = ParamStore::new(71);
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t, &mut store);
        let p = FusionParams::bind(&mut b, "fusion", patch, c);
        let black = vec![0.0; frames_len * h * w * 3];
        let fs = t.constant(vec![0.4; c], &[c]);
        let fused = fuse_features(&mut t, &black, frames_len, h, w, patch, fs, &p);
        // Zero embedding (black frames, zero bias): what remains is exactly
        // the additive position encoding.
        let (fh, fw) = (h / patch, w / patch);
        let pe = blocks::sinusoidal_position_encoding_2d(fh, fw, c);
        for ti in 0..frames_len {
            for (i, &expected) in pe.iter().enumerate() {
                assert_eq!(t.data(fused)[ti * pe.len() + i], expected);
            }
        }
    }

    #[test]
    fn episode_roundtrip_is_exact() {
        let ep = generate_episode(11, Difficulty::MotionDiscriminative, 6, 16, 16, 3).unwrap();
        let bytes = episode_to_bytes(&ep);
        let back = read_episode(&mut bytes.as_slice()).unwrap();
        assert_eq!(ep.frames, back.frames);
        assert_eq!(ep.gt_masks, back.gt_masks);
        assert_eq!(ep.gt_boxes, back.gt_boxes);
        assert_eq!(ep.expression, back.expression);
        assert_eq!(ep.seed, back.seed);
        assert_eq!(episode_to_bytes(&back), bytes);
    }

    #[test]
    fn read_rejects_bad_magic() {
        let mut bytes = episode_to_bytes(&generate_episode(1, Difficulty::Appearance, 2, 8, 8, 2).unwrap());
        bytes[0] = b'X';
        assert!(read_episode(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn finite_difference_fusion() {
        for case in crate::gradcheck::fusion_cases() {
            let report = crate::gradcheck::check_gradients(&case);
            assert!(
                report.max_rel_error < 1e-4,
                "{}: max rel error {:.3e} at {}",
                case.name,
                report.max_rel_error,
                report.worst_param
            );
        }
    }
}
