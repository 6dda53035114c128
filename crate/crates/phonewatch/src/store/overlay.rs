use image::{Rgb, RgbImage};
use imageproc::drawing::draw_hollow_rect_mut;
use imageproc::rect::Rect;
use phonewatch_core::detect::ClassLabel;

use crate::pipeline::FrameDetection;

const THICKNESS: i32 = 2;

fn colour(label: &ClassLabel) -> Rgb<u8> {
    match label.as_str() {
        ClassLabel::PHONE => Rgb([230, 30, 30]),
        ClassLabel::WINDSCREEN => Rgb([30, 200, 60]),
        ClassLabel::LICENCE_PLATE => Rgb([40, 90, 230]),
        _ => Rgb([240, 200, 20]),
    }
}

/// The frame with every detection box drawn on it.
pub fn draw_overlay(frame: &RgbImage, detections: &[FrameDetection]) -> RgbImage {
    let mut out = frame.clone();
    for d in detections {
        let b = &d.bbox;
        let (x0, y0) = (b.x_min().floor() as i32, b.y_min().floor() as i32);
        let (x1, y1) = (b.x_max().ceil() as i32, b.y_max().ceil() as i32);
        for k in 0..THICKNESS {
            let w = x1 - x0 - 2 * k;
            let h = y1 - y0 - 2 * k;
            if w <= 0 || h <= 0 {
                break;
            }
            draw_hollow_rect_mut(
                &mut out,
                Rect::at(x0 + k, y0 + k).of_size(w as u32, h as u32),
                colour(&d.label),
            );
        }
    }
    out
}
