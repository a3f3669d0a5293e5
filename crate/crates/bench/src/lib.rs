//! Fixtures shared by the benchmarks.

use coded_tof::scene::{baseline_for_disparity, preset_scene, render_lightfield, Preset, PresetParams, Texture};
use coded_tof::{LightField, PointCloud, RngState};

/// Textured fronto-parallel edge at 1 m over 3 m.
pub fn edge_lightfield(size: usize, views: usize) -> LightField {
    let params = PresetParams {
        height: size,
        width: size,
        texture: Texture::Noise {
            lo: 0.6,
            hi: 1.0,
            min_wavelength: 12.0,
        },
        ..PresetParams::default()
    };
    let scene = preset_scene(Preset::Edge, &params, &mut RngState::new(1)).expect("valid preset");
    let baseline = baseline_for_disparity(3.0, 1000.0, 3000.0, views);
    render_lightfield(&scene, views, views, baseline, 3000.0).expect("valid light field")
}

/// `n` points spread like a projected depth map: a pixel grid in x, y and
/// depths around 2 m.
pub fn depth_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = RngState::new(seed);
    let side = (n as f64).sqrt().ceil() as usize;
    let points = (0..n)
        .map(|i| {
            let z = rng.uniform(1000.0, 3000.0).expect("ordered bounds");
            [(i % side) as f64, (i / side) as f64, z]
        })
        .collect();
    PointCloud {
        points,
        depth_scale: 1.0,
    }
}
