//! Synthetic traffic scenes with matching detection scripts, for tests,
//! benchmarks and demo fixtures.

use std::fs;
use std::io;
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::draw_filled_rect_mut;
use imageproc::rect::Rect;
use phonewatch_core::detect::{ClassLabel, ScriptEntry};
use phonewatch_core::geometry::{BBox, FrameSize};

use crate::backend::{FrameBackend, Throttled};
use crate::frames::{write_frame_dir, Frame, TimestampPolicy};
use crate::pipeline::{CropConfig, Pipeline, PipelineMode};
use crate::script::render_script;
use phonewatch_core::detect::{DetectorSpec, ScriptCoords, ScriptedBackend};
use phonewatch_core::track::{Tracker, TrackerConfig};
use std::time::Duration;

/// A vehicle crossing the scene at constant velocity.
#[derive(Debug, Clone)]
pub struct Vehicle {
    /// Windscreen box on the vehicle's first frame.
    pub windscreen: BBox,
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub visible: Range<u64>,
    /// Frames on which the driver's phone is visible.
    pub phone_frames: Vec<u64>,
}

impl Vehicle {
    fn offset(&self, frame: u64) -> (f64, f64) {
        let t = (frame - self.visible.start) as f64;
        (self.velocity.0 * t, self.velocity.1 * t)
    }

    fn shifted(b: &BBox, (dx, dy): (f64, f64)) -> BBox {
        BBox::new(
            b.x_min() + dx,
            b.y_min() + dy,
            b.x_max() + dx,
            b.y_max() + dy,
        )
        .expect("shift keeps box valid")
    }

    pub fn windscreen_at(&self, frame: u64) -> BBox {
        Self::shifted(&self.windscreen, self.offset(frame))
    }

    /// Plate centred under the windscreen.
    pub fn plate_at(&self, frame: u64) -> BBox {
        let w = self.windscreen_at(frame);
        let (cx, _) = w.center();
        let top = w.y_max() + w.height() * 0.9;
        BBox::new(
            cx - w.width() * 0.15,
            top,
            cx + w.width() * 0.15,
            top + w.height() * 0.25,
        )
        .expect("plate box")
    }

    /// Phone held in the right-hand (driver's) half of the windscreen.
    pub fn phone_at(&self, frame: u64) -> BBox {
        let w = self.windscreen_at(frame);
        let x = w.x_min() + w.width() * 0.68;
        let y = w.y_min() + w.height() * 0.35;
        BBox::new(x, y, x + w.width() * 0.08, y + w.height() * 0.3).expect("phone box")
    }

    pub fn body_at(&self, frame: u64) -> BBox {
        let w = self.windscreen_at(frame);
        BBox::new(
            w.x_min() - w.width() * 0.1,
            w.y_min() - w.height() * 0.2,
            w.x_max() + w.width() * 0.1,
            w.y_max() + w.height() * 1.5,
        )
        .expect("body box")
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub size: FrameSize,
    pub frames: u64,
    pub vehicles: Vec<Vehicle>,
}

fn score(frame: u64, salt: u64) -> f64 {
    // deterministic, varied, always above the live threshold
    0.6 + 0.35 * (((frame * 7 + salt * 3) % 11) as f64 / 10.0)
}

fn bb(a: f64, b: f64, c: f64, d: f64) -> BBox {
    BBox::new(a, b, c, d).expect("valid box")
}

impl Scenario {
    /// 200 frames, three vehicles: vehicle A shows a phone on 40
    /// nonconsecutive frames, vehicle B on a continuous run, vehicle C
    /// never. Two violations, three vehicles.
    pub fn three_vehicles() -> Self {
        Scenario {
            size: FrameSize::new(640, 360).expect("size"),
            frames: 200,
            vehicles: vec![
                Vehicle {
                    windscreen: bb(40.0, 60.0, 200.0, 120.0),
                    velocity: (1.0, 0.25),
                    visible: 0..120,
                    phone_frames: (0..40).map(|k| 20 + 2 * k).collect(),
                },
                Vehicle {
                    windscreen: bb(420.0, 40.0, 580.0, 100.0),
                    velocity: (-0.5, 0.3),
                    visible: 40..170,
                    phone_frames: (60..100).collect(),
                },
                Vehicle {
                    windscreen: bb(250.0, 200.0, 390.0, 250.0),
                    velocity: (0.0, 0.0),
                    visible: 80..200,
                    phone_frames: Vec::new(),
                },
            ],
        }
    }

    /// 120 frames, two vehicles side by side; only the left driver uses a
    /// phone. One violation, two vehicles.
    pub fn two_vehicles() -> Self {
        Scenario {
            size: FrameSize::new(640, 360).expect("size"),
            frames: 120,
            vehicles: vec![
                Vehicle {
                    windscreen: bb(40.0, 60.0, 200.0, 120.0),
                    velocity: (1.0, 0.5),
                    visible: 0..120,
                    phone_frames: (30..60).collect(),
                },
                Vehicle {
                    windscreen: bb(400.0, 60.0, 560.0, 120.0),
                    velocity: (-1.0, 0.5),
                    visible: 10..110,
                    phone_frames: Vec::new(),
                },
            ],
        }
    }

    /// `frames` frames with one stationary vehicle whose driver is on the
    /// phone throughout (`active`), or an empty road.
    pub fn constant(frames: u64, active: bool) -> Self {
        Scenario {
            size: FrameSize::new(640, 360).expect("size"),
            frames,
            vehicles: if active {
                vec![Vehicle {
                    windscreen: bb(200.0, 100.0, 440.0, 190.0),
                    velocity: (0.0, 0.0),
                    visible: 0..frames,
                    phone_frames: (0..frames).collect(),
                }]
            } else {
                Vec::new()
            },
        }
    }

    fn visible(&self, frame: u64) -> impl Iterator<Item = (usize, &Vehicle)> {
        self.vehicles
            .iter()
            .enumerate()
            .filter(move |(_, v)| v.visible.contains(&frame))
    }

    fn entries(
        &self,
        with: impl Fn(u64, usize, &Vehicle) -> Vec<(ClassLabel, BBox)>,
    ) -> Vec<ScriptEntry> {
        let mut out = Vec::new();
        for f in 0..self.frames {
            for (i, v) in self.visible(f) {
                for (label, bbox) in with(f, i, v) {
                    out.push(ScriptEntry {
                        frame: f,
                        label,
                        bbox,
                        score: score(f, i as u64),
                        space: self.size,
                    });
                }
            }
        }
        out
    }

    /// Phones and plates in frame coordinates, for a single-step detector.
    pub fn single_step_script(&self) -> Vec<ScriptEntry> {
        self.entries(|f, _, v| {
            let mut out = vec![(ClassLabel::licence_plate(), v.plate_at(f))];
            if v.phone_frames.contains(&f) {
                out.push((ClassLabel::phone(), v.phone_at(f)));
            }
            out
        })
    }

    pub fn windscreen_script(&self) -> Vec<ScriptEntry> {
        self.entries(|f, _, v| vec![(ClassLabel::windscreen(), v.windscreen_at(f))])
    }

    /// Phones in frame coordinates, for the step-2 detector.
    pub fn phone_script(&self) -> Vec<ScriptEntry> {
        self.entries(|f, _, v| {
            if v.phone_frames.contains(&f) {
                vec![(ClassLabel::phone(), v.phone_at(f))]
            } else {
                Vec::new()
            }
        })
    }

    pub fn render(&self, frame: u64) -> RgbImage {
        let mut img =
            RgbImage::from_pixel(self.size.width(), self.size.height(), Rgb([70, 72, 75]));
        for (i, v) in self.visible(frame) {
            let shade = 120 + 40 * (i as u8 % 3);
            for (b, colour) in [
                (v.body_at(frame), Rgb([shade, shade / 2, 60])),
                (v.windscreen_at(frame), Rgb([150, 190, 210])),
                (v.plate_at(frame), Rgb([240, 220, 40])),
            ] {
                let Some(b) = b.snap_to_pixels(self.size) else {
                    continue;
                };
                draw_filled_rect_mut(
                    &mut img,
                    Rect::at(b.x_min() as i32, b.y_min() as i32)
                        .of_size(b.width() as u32, b.height() as u32),
                    colour,
                );
            }
        }
        img
    }

    pub fn frames(&self, timestamps: TimestampPolicy) -> Vec<Frame> {
        (0..self.frames)
            .map(|i| Frame {
                index: i,
                timestamp: timestamps.stamp(i),
                image: self.render(i),
            })
            .collect()
    }

    /// Writes `frames/`, `single.jsonl`, `windscreen.jsonl` and
    /// `phone.jsonl` under `dir`.
    pub fn write_fixture(&self, dir: &Path) -> io::Result<FixturePaths> {
        let paths = FixturePaths {
            frames: dir.join("frames"),
            single: dir.join("single.jsonl"),
            windscreen: dir.join("windscreen.jsonl"),
            phone: dir.join("phone.jsonl"),
        };
        write_frame_dir(
            &paths.frames,
            &self.frames(TimestampPolicy::nominal_from_epoch_ms(0, 25.0)),
        )
        .map_err(io::Error::other)?;
        fs::write(&paths.single, render_script(&self.single_step_script()))?;
        fs::write(&paths.windscreen, render_script(&self.windscreen_script()))?;
        fs::write(&paths.phone, render_script(&self.phone_script()))?;
        Ok(paths)
    }
}

/// Scripted backend over `entries` (frame coordinates).
pub fn scripted(
    name: &str,
    classes: &[&str],
    input: FrameSize,
    entries: Vec<ScriptEntry>,
    latency: Duration,
) -> FrameBackend {
    let spec = DetectorSpec {
        name: name.into(),
        input_size: input,
        classes: classes.iter().map(|c| ClassLabel::new(c)).collect(),
        score_threshold: 0.5,
    };
    let backend = ScriptedBackend::new(spec, ScriptCoords::Frame, entries);
    if latency.is_zero() {
        Box::new(backend)
    } else {
        Box::new(Throttled::new(backend, latency))
    }
}

impl Scenario {
    /// A pipeline whose scripted detectors replay this scenario. Every
    /// inference costs `latency`.
    pub fn pipeline(
        &self,
        mode: PipelineMode,
        tracker: Option<TrackerConfig>,
        latency: Duration,
    ) -> Pipeline {
        let tracker = tracker.map(|c| Tracker::new(c).expect("valid tracker config"));
        let square = |n| FrameSize::new(n, n).expect("size");
        match mode {
            PipelineMode::SingleStep => Pipeline::single_step(
                scripted(
                    "single",
                    &[ClassLabel::PHONE, ClassLabel::LICENCE_PLATE],
                    square(320),
                    self.single_step_script(),
                    latency,
                ),
                tracker,
            ),
            PipelineMode::TwoStep => Pipeline::two_step(
                scripted(
                    "windscreen",
                    &[ClassLabel::WINDSCREEN],
                    square(320),
                    self.windscreen_script(),
                    latency,
                ),
                scripted(
                    "phone",
                    &[ClassLabel::PHONE],
                    square(320),
                    self.phone_script(),
                    latency,
                ),
                CropConfig::default(),
                tracker,
            ),
        }
        .expect("scenario detectors satisfy the mode")
    }
}

/// Writes the fixture plus a `config.toml` replaying it through scripted
/// detectors; returns the config path. The store goes to `dir/store`.
pub fn write_demo(
    scenario: &Scenario,
    dir: &Path,
    mode: PipelineMode,
    latency_us: u64,
) -> io::Result<PathBuf> {
    scenario.write_fixture(dir)?;
    let mode = match mode {
        PipelineMode::SingleStep => "single_step",
        PipelineMode::TwoStep => "two_step",
    };
    let detector = |role: &str, classes: &str| {
        format!(
            "[detectors.{role}]\nscript = \"{role}.jsonl\"\ninput_size = [320, 320]\n\
             classes = [{classes}]\ncoords = \"frame\"\nsimulated_latency_us = {latency_us}\n\n"
        )
    };
    let config = format!(
        "stream_id = \"demo\"\n\n[pipeline]\nmode = \"{mode}\"\n\n{}{}{}\
         [store]\ndir = \"store\"\n\n[server]\nbind = \"127.0.0.1:8080\"\n\n\
         [source]\ntimestamps = {{ kind = \"nominal\", start = \"2024-05-01T08:00:00.000Z\", fps = 25.0 }}\n",
        detector("single", "\"phone\", \"licence_plate\""),
        detector("windscreen", "\"windscreen\""),
        detector("phone", "\"phone\""),
    );
    let path = dir.join("config.toml");
    fs::write(&path, config)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub frames: PathBuf,
    pub single: PathBuf,
    pub windscreen: PathBuf,
    pub phone: PathBuf,
}
