//! Flat-shaded 32x32 renderer for the planar world: a fixed overhead view and
//! a zoomed crop that follows one end effector.

use super::{World, ARM_COLOR, BACKGROUND, EEF_COLOR, OBJECT_HALF, ZONE_COLOR, ZONE_HALF};
use crate::dataset::{Image, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::embodiment::{forward_kinematics, link_tip};
use crate::geometry::{compose, vadd, Pose, Vec3};

/// Axis-aligned world window mapped onto the image: x runs down the rows
/// (x_max at the top), y runs along the columns.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// Overhead camera covering the whole workspace of both arms.
pub const MAIN_VIEW: View = View {
    x_min: -0.10,
    x_max: 0.54,
    y_min: -0.32,
    y_max: 0.32,
};

/// Wrist-camera window half-size in meters.
pub const WRIST_HALF: f64 = 0.08;

impl View {
    fn centered(c: Vec3, half: f64) -> View {
        View {
            x_min: c[0] - half,
            x_max: c[0] + half,
            y_min: c[1] - half,
            y_max: c[1] + half,
        }
    }

    /// World coordinates of a pixel center.
    fn world_at(&self, row: usize, col: usize) -> (f64, f64) {
        let fx = (row as f64 + 0.5) / IMAGE_HEIGHT as f64;
        let fy = (col as f64 + 0.5) / IMAGE_WIDTH as f64;
        (
            self.x_max - fx * (self.x_max - self.x_min),
            self.y_min + fy * (self.y_max - self.y_min),
        )
    }

    fn pixel_of(&self, wx: f64, wy: f64) -> Option<(usize, usize)> {
        let fx = (self.x_max - wx) / (self.x_max - self.x_min);
        let fy = (wy - self.y_min) / (self.y_max - self.y_min);
        if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&fy) {
            return None;
        }
        Some((
            (fx * IMAGE_HEIGHT as f64) as usize,
            (fy * IMAGE_WIDTH as f64) as usize,
        ))
    }
}

fn put(img: &mut Image, row: usize, col: usize, color: [u8; 3]) {
    let plane = img.h * img.w;
    for (c, &v) in color.iter().enumerate() {
        img.data[c * plane + row * img.w + col] = v;
    }
}

/// Paint an axis-aligned square of the given half-size.
fn paint_square(img: &mut Image, view: &View, center: Vec3, half: f64, color: [u8; 3]) {
    for row in 0..img.h {
        for col in 0..img.w {
            let (wx, wy) = view.world_at(row, col);
            if (wx - center[0]).abs() <= half && (wy - center[1]).abs() <= half {
                put(img, row, col, color);
            }
        }
    }
}

/// Paint a segment by dense sampling; width is one pixel.
fn paint_segment(img: &mut Image, view: &View, a: Vec3, b: Vec3, color: [u8; 3]) {
    const SAMPLES: usize = 96;
    for i in 0..=SAMPLES {
        let s = i as f64 / SAMPLES as f64;
        let wx = a[0] + s * (b[0] - a[0]);
        let wy = a[1] + s * (b[1] - a[1]);
        if let Some((row, col)) = view.pixel_of(wx, wy) {
            put(img, row, col, color);
        }
    }
}

fn render(world: &World, view: &View) -> Image {
    let mut img = Image::zeros(IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH);
    for row in 0..img.h {
        for col in 0..img.w {
            put(&mut img, row, col, BACKGROUND);
        }
    }
    let sides = World::active_sides(&world.spec);
    for &side in &sides {
        paint_square(&mut img, view, super::zone_center(side), ZONE_HALF, ZONE_COLOR);
    }
    for &side in &sides {
        if let Some(obj) = &world.objects[side] {
            paint_square(&mut img, view, obj.pos, OBJECT_HALF, obj.color);
        }
    }
    for &side in &sides {
        let model = world.arm_model(side);
        let frames = forward_kinematics(model, world.arm_q(side)).unwrap();
        let mut points: Vec<Vec3> = Vec::new();
        for (i, f) in frames.iter().enumerate() {
            let local = Pose::new(f.translation, f.rotation);
            let p = compose(&world.torso, &local);
            points.push(p.translation);
            if i == frames.len() - 1 {
                let tip = link_tip(model, &frames, i);
                points.push(compose(&world.torso, &Pose::from_translation(tip)).translation);
            }
        }
        for pair in points.windows(2) {
            paint_segment(&mut img, view, pair[0], pair[1], ARM_COLOR);
        }
        // End-effector marker, 3x3.
        let eef = world.eef_pose(side).translation;
        for dr in [-1.0, 0.0, 1.0] {
            for dc in [-1.0, 0.0, 1.0] {
                let step = (view.x_max - view.x_min) / IMAGE_HEIGHT as f64;
                let p = vadd(eef, [dr * step, dc * step, 0.0]);
                if let Some((row, col)) = view.pixel_of(p[0], p[1]) {
                    put(&mut img, row, col, EEF_COLOR);
                }
            }
        }
    }
    img
}

/// The fixed overhead image.
pub fn render_main(world: &World) -> Image {
    render(world, &MAIN_VIEW)
}

/// Zoomed crop centered on one arm's end effector.
pub fn render_wrist(world: &World, side: usize) -> Image {
    let eef = world.eef_pose(side).translation;
    render(world, &View::centered(eef, WRIST_HALF))
}
