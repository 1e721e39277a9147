use ovs_core::coarse::CoarseParams;
use ovs_core::dense_flow::BaselineFlow;
use ovs_core::expand::{expand_sequence, ExpandMode, ExpandParams};
use ovs_core::stabilizer::{
    crop_rectangle, estimate_trajectory, render_stabilized, smooth_trajectory, stabilize, Fill,
    StabilizeParams,
};
use ovs_core::synth::{default_suite, JitterSpec};
use ovs_core::{default_pad, pad_frame, Canvas, Frame};

fn suite(frames: usize) -> Vec<Frame> {
    let spec = JitterSpec {
        n_frames: frames,
        ..JitterSpec::default()
    };
    default_suite(0.25, &spec).unwrap().frames
}

#[test]
fn holes_shrink_as_canvases_grow() {
    let frames = suite(8);
    let coarse = CoarseParams::default();
    let traj = estimate_trajectory(&frames, &coarse, 0).unwrap();
    let smooth = smooth_trajectory(&traj, 7, 7.0 / 6.0).unwrap();
    let p = ExpandParams {
        iterations: 3,
        mode: ExpandMode::CoarseOnly,
        ..ExpandParams::new(default_pad(frames[0].width()))
    };
    let mut snaps: Vec<Vec<Canvas>> = vec![];
    let mut obs = |_: usize, cs: &[Canvas]| snaps.push(cs.to_vec());
    expand_sequence(&frames, &p, &BaselineFlow::default(), None, Some(&mut obs)).unwrap();
    let holes: Vec<Vec<usize>> = snaps
        .iter()
        .map(|cs| {
            render_stabilized(cs, &traj, &smooth, Fill::None)
                .unwrap()
                .holes
        })
        .collect();
    assert!(
        holes[0].iter().sum::<usize>() > 0,
        "the jittery suite should leave holes"
    );
    for pair in holes.windows(2) {
        for (a, b) in pair[0].iter().zip(&pair[1]) {
            assert!(b <= a, "hole area grew: {a} -> {b}");
        }
    }
    assert!(holes[3].iter().sum::<usize>() < holes[0].iter().sum::<usize>());
}

#[test]
fn identity_smoothing_reproduces_input() {
    let frames = suite(5);
    let traj = estimate_trajectory(&frames, &CoarseParams::default(), 0).unwrap();
    let sources: Vec<Canvas> = frames.iter().map(|f| pad_frame(f, 0)).collect();
    let out = render_stabilized(&sources, &traj, &traj, Fill::None).unwrap();
    assert_eq!(out.total_holes(), 0);
    assert_eq!(out.frames, frames);
}

#[test]
fn nearest_fill_leaves_no_invalid_pixel() {
    let frames = suite(6);
    let params = StabilizeParams {
        window: 5,
        sigma: 1.0,
        fill: Fill::Nearest,
        ..StabilizeParams::default()
    };
    let (out, _, _) = stabilize(&frames, None, &params).unwrap();
    assert!(out.total_holes() > 0, "holes exist before filling");
    assert!(out.masks.iter().all(|m| m.count() == m.data().len()));
    let rect = crop_rectangle(&out.masks).unwrap();
    assert_eq!(
        (rect.width, rect.height),
        (frames[0].width(), frames[0].height())
    );
}
