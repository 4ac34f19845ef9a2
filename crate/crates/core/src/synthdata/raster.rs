use std::io::Cursor;

use image::{ImageBuffer, Rgb};

use super::scene::{Category, Fill, SceneObject, SceneSpec};
use super::DataError;
use crate::diffcore::NdArray;

pub const BACKGROUND: f64 = 0.0;

/// Paints the scene into a `[height, width, 3]` array in `[0, 1]`.
pub fn rasterize(scene: &SceneSpec) -> NdArray {
    let (w, h) = (scene.width, scene.height);
    let mut data = vec![BACKGROUND; w * h * 3];
    for obj in &scene.objects {
        let rgb = obj.color.rgb8().map(|c| c as f64 / 255.0);
        let mask = object_mask(obj, w, h);
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    NdArray::new(vec![h, w, 3], data).expect("raster shape")
}

fn inside(obj: &SceneObject, px: f64, py: f64) -> bool {
    let b = obj.bbox;
    if px < b.x || py < b.y || px > b.x + b.w || py > b.y + b.h {
        return false;
    }
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    let (dx, dy) = (px - (b.x + rx), py - (b.y + ry));
    match obj.category {
        Category::Square => true,
        Category::Circle | Category::Ellipse => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
        Category::Diamond => dx.abs() / rx + dy.abs() / ry <= 1.0,
        Category::Triangle => {
            let t = (py - b.y) / b.h;
            dx.abs() <= t * rx
        }
        Category::Cross => dx.abs() <= b.w / 6.0 || dy.abs() <= b.h / 6.0,
    }
}

fn object_mask(obj: &SceneObject, w: usize, h: usize) -> Vec<bool> {
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            mask[y * w + x] = inside(obj, x as f64 + 0.5, y as f64 + 0.5);
        }
    }
    if obj.state.fill == Fill::Hollow {
        let r = ((obj.bbox.w.max(obj.bbox.h) / 9.0).round() as i64).max(1);
        let solid = mask.clone();
        let at = |x: i64, y: i64| {
            x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && solid[y as usize * w + x as usize]
        };
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let interior = (-r..=r).all(|dy| (-r..=r).all(|dx| at(x + dx, y + dy)));
                if interior {
                    mask[y as usize * w + x as usize] = false;
                }
            }
        }
    }
    mask
}

pub fn encode_png(raster: &NdArray) -> Result<Vec<u8>, DataError> {
    let [h, w, c] = raster.shape() else {
        return Err(DataError::Image(format!(
            "expected [h, w, 3], got {:?}",
            raster.shape()
        )));
    };
    if *c != 3 {
        return Err(DataError::Image(format!("expected 3 channels, got {c}")));
    }
    let bytes: Vec<u8> = raster
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(*w as u32, *h as u32, bytes).ok_or_else(|| DataError::Image("buffer size".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageOutputFormat::Png)
        .map_err(|e| DataError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<NdArray, DataError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DataError::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|c| c as f64 / 255.0).collect();
    NdArray::new(vec![h as usize, w as usize, 3], data).map_err(|e| DataError::Image(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::scene::{generate_scene, Color, ObjectState, PixelBox, SceneConfig, Size};

    fn lone_square() -> SceneSpec {
        SceneSpec {
            scene_id: "one".into(),
            width: 64,
            height: 64,
            objects: vec![SceneObject {
                category: Category::Square,
                color: Color::Red,
                position_cell: 0,
                state: ObjectState {
                    size: Size::Large,
                    fill: Fill::Filled,
                },
                bbox: PixelBox {
                    x: 2.0,
                    y: 3.0,
                    w: 18.0,
                    h: 18.0,
                },
            }],
            target_index: 0,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let mut s = lone_square();
        s.objects.clear();
        assert!(rasterize(&s).data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn red_square_stays_in_box() {
        let img = rasterize(&lone_square());
        let red = Color::Red.rgb8().map(|c| c as f64 / 255.0);
        let mut painted = 0;
        for y in 0..64 {
            for x in 0..64 {
                let px = &img.data()[(y * 64 + x) * 3..(y * 64 + x) * 3 + 3];
                if px.iter().any(|&v| v != BACKGROUND) {
                    assert_eq!(px, &red);
                    assert!(
                        (2..20).contains(&x) && (3..21).contains(&y),
                        "pixel ({x},{y}) outside box"
                    );
                    painted += 1;
                }
            }
        }
        assert_eq!(painted, 18 * 18);
    }

    #[test]
    fn every_shape_paints_inside_its_box() {
        let c = SceneConfig::default();
        for seed in 0..50 {
            let s = generate_scene(seed, &c).unwrap();
            for obj in &s.objects {
                let m = object_mask(obj, 64, 64);
                assert!(m.iter().any(|&b| b), "empty mask for {:?}", obj.category);
                for (i, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                    let (x, y) = ((i % 64) as f64, (i / 64) as f64);
                    let b = obj.bbox;
                    assert!(x >= b.x.floor() && x < b.x + b.w && y >= b.y.floor() && y < b.y + b.h);
                }
            }
        }
    }

    #[test]
    fn mean_pixel_near_background() {
        let c = SceneConfig::default();
        let mut total = 0.0;
        for seed in 0..100 {
            let img = rasterize(&generate_scene(seed, &c).unwrap());
            total += img.sum() / img.len() as f64;
        }
        let mean = total / 100.0;
        assert!((mean - BACKGROUND).abs() < 0.2, "mean {mean}");
    }

    #[test]
    fn png_round_trip_is_exact() {
        let img = rasterize(&generate_scene(3, &SceneConfig::default()).unwrap());
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert!(back.bitwise_eq(&img));
    }
}
