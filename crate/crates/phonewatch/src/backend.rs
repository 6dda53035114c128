//! Running detectors on decoded frames.

use std::time::{Duration, Instant};

use fast_image_resize::{FilterType, ResizeAlg, ResizeOptions, Resizer};
use image::RgbImage;
use phonewatch_core::detect::{
    detect, DetectError, DetectRequest, Detection, DetectorBackend, DetectorSpec,
};
use phonewatch_core::geometry::{FrameSize, Transform, TransformChain};

/// A detector that works on RGB frames and can move between threads.
pub type FrameBackend = Box<dyn DetectorBackend<RgbImage> + Send>;

/// Adds a fixed busy-wait before each inference. The scripted backend costs
/// nothing, so this stands in for model latency when benchmarking the
/// pipeline structure.
pub struct Throttled<B> {
    inner: B,
    latency: Duration,
}

impl<B> Throttled<B> {
    pub fn new(inner: B, latency: Duration) -> Self {
        Self { inner, latency }
    }
}

impl<I: ?Sized, B: DetectorBackend<I>> DetectorBackend<I> for Throttled<B> {
    fn spec(&self) -> &DetectorSpec {
        self.inner.spec()
    }

    fn infer(&mut self, request: &DetectRequest<'_, I>) -> Result<Vec<Detection>, DetectError> {
        let start = Instant::now();
        while start.elapsed() < self.latency {
            std::hint::spin_loop();
        }
        self.inner.infer(request)
    }
}

/// Detections from one backend call.
#[derive(Debug, Clone)]
pub struct Detected {
    /// Boxes mapped back to original-frame coordinates.
    pub frame_space: Vec<Detection>,
    /// Mapping from the original frame to the detector input.
    pub view: TransformChain,
}

/// Resizes `image` to the backend's input size and runs it. `prefix` maps
/// the original frame onto `image` (empty when `image` is the full frame).
pub fn detect_frame<B: DetectorBackend<RgbImage> + ?Sized>(
    backend: &mut B,
    frame_index: u64,
    image: &RgbImage,
    source_size: FrameSize,
    prefix: &TransformChain,
) -> Result<Detected, DetectError> {
    let input = backend.spec().input_size;
    let here = FrameSize::new(image.width(), image.height()).map_err(|e| DetectError::Backend {
        backend: backend.spec().name.clone(),
        message: e.to_string(),
    })?;
    let view = prefix.clone().then(Transform::resize(here, input));
    let resized;
    let pixels = if here == input {
        image
    } else {
        let mut out = RgbImage::new(input.width(), input.height());
        Resizer::new()
            .resize(
                image,
                &mut out,
                &ResizeOptions::new().resize_alg(ResizeAlg::Convolution(FilterType::Bilinear)),
            )
            .map_err(|e| DetectError::Backend {
                backend: backend.spec().name.clone(),
                message: format!("resizing to the detector input: {e}"),
            })?;
        resized = out;
        &resized
    };
    let found = detect(
        backend,
        &DetectRequest {
            frame_index,
            image: pixels,
            source_size,
            view: &view,
        },
    )?;
    let frame_space = found
        .into_iter()
        .filter_map(|d| {
            let bbox = view.invert(&d.bbox)?;
            Some(Detection { bbox, ..d })
        })
        .collect();
    Ok(Detected { frame_space, view })
}
