use gesture_diff_py as gd;
use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn rust_side_entry_points() {
    let s = gd::PySchedule::new(500, 1e-4, 0.02).unwrap();
    assert_eq!(s.steps(), 500);
    assert!((s.alpha_bar(500).unwrap() - 6.3527e-3).abs() < 1e-6);
    assert!(s.beta(0).is_err());
    assert_eq!(gd::segment_starts(60, 40, 8).unwrap(), vec![0, 20]);
    let g = gd::guided_noise(vec![vec![1.0, 2.0]], vec![vec![0.0, 0.0]], 0.2).unwrap();
    assert!((g[0][1] - 0.4).abs() < 1e-12);
    assert!(gd::guided_noise(vec![vec![1.0, 2.0]], vec![vec![0.0]], 0.2).is_err());
    assert!(gd::interpolate_overlap(vec![], vec![]).is_err());
}

#[test]
fn module_imports_in_embedded_interpreter() {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(gd::gesture_diff_py)(py);
        let env = PyDict::new(py);
        env.set_item("gd", m).unwrap();
        py.run(
            c"
src = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
dst = [[x + 0.25, y] for x, y in src]
out = gd.warp_points(src, dst, [[0.5, 0.5]], 0.0)
assert abs(out[0][0] - 0.75) < 1e-9
clips = gd.make_synthetic(num_clips=1, frames_per_clip=32, num_keypoints=4, seed=1)
assert len(clips[0]['keypoints']) == 32
try:
    gd.Model('/nonexistent/model.ckpt')
    raise AssertionError('loaded a missing checkpoint')
except FileNotFoundError:
    pass
",
            Some(&env),
            None,
        )
        .unwrap();
    });
}
