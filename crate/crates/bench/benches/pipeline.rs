use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array3;

use nulite_core::data::{make_hv_target, synthetic_disks, AnnotatedImage, Normalization, SyntheticConfig};
use nulite_core::encoder::EncoderVariant;
use nulite_core::metrics::image_metrics;
use nulite_core::network::{Network, NetworkConfig};
use nulite_core::postprocess::{postprocess, ImageMaps, PostprocessParams};
use nulite_core::runtime::predict_maps;

fn sample(size: usize) -> AnnotatedImage {
    let cfg = SyntheticConfig { size, min_disks: size / 16, max_disks: size / 8, ..Default::default() };
    synthetic_disks(1, &cfg, 7).remove(0)
}

/// Ideal network maps for an annotated image.
fn oracle_maps(img: &AnnotatedImage, classes: usize) -> ImageMaps {
    let (h, w) = img.types.dim();
    ImageMaps {
        np_prob: img.instances.labels().mapv(|id| (id > 0) as u8 as f32),
        hv: make_hv_target(&img.instances),
        nt_prob: Array3::from_shape_fn((classes, h, w), |(k, r, c)| (img.types[[r, c]] as usize == k) as u8 as f32),
    }
}

fn bench_postprocess(c: &mut Criterion) {
    let img = sample(256);
    let maps = oracle_maps(&img, 3);
    let params = PostprocessParams::default();
    c.bench_function("postprocess_256", |b| b.iter(|| postprocess(black_box(&maps), &params).unwrap()));
}

fn bench_metrics(c: &mut Criterion) {
    let img = sample(256);
    let (pred, _) = postprocess(&oracle_maps(&img, 3), &PostprocessParams::default()).unwrap();
    c.bench_function("image_metrics_256", |b| {
        b.iter(|| image_metrics("a", 0, &img.instances, &img.types, black_box(&pred), &img.types, 3, 12.0).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let config = NetworkConfig::new(EncoderVariant::T8, 3, 2);
    let network = Network::new(&config, 0).unwrap().reparameterize().unwrap();
    let img = sample(128);
    let norm = Normalization::default();
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    group.bench_function("t8_fused_128", |b| b.iter(|| predict_maps(&network, black_box(&img.rgb), &norm).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_postprocess, bench_metrics, bench_forward);
criterion_main!(benches);
