use std::collections::BTreeMap;

use corrflow::attention::FeatureMap;
use corrflow::io::{generate_clip, load_checkpoint, read_dataset, read_frames, read_keypoints, read_masks, save_checkpoint, write_clip, SyntheticSpec};
use corrflow::propagation::{propagate_features, propagate_video, Annotation, Keypoint, Propagated, PropagationConfig};
use corrflow::training::{Dataset, TrainConfig, Trainer, Video};
use tempfile::TempDir;

#[test]
fn synthetic_clip_survives_disk() {
    let dir = TempDir::new().unwrap();
    let clip = generate_clip(&SyntheticSpec::default(), 5).unwrap();
    write_clip(&dir.path().join("clip_0000"), &clip).unwrap();
    let frames = read_frames(&dir.path().join("clip_0000/frames")).unwrap();
    assert_eq!(frames.len(), clip.frames.len());
    for (a, b) in frames.iter().zip(&clip.frames) {
        assert_eq!(a.to_u8(), b.to_u8());
    }
    assert_eq!(read_masks(&dir.path().join("clip_0000/masks")).unwrap(), clip.masks);
    assert_eq!(read_keypoints(&dir.path().join("clip_0000/keypoints.csv")).unwrap(), clip.keypoints);
    assert_eq!(read_dataset(dir.path()).unwrap().len(), 1);
}

#[test]
fn flow_warps_frames_exactly() {
    let spec = SyntheticSpec {
        velocities: Some(vec![(3, -2), (-1, 2)]),
        ..SyntheticSpec::default()
    };
    let clip = generate_clip(&spec, 8).unwrap();
    let (h, w) = (32, 32);
    for t in 0..clip.flow.len() {
        let next_ids = clip.masks[t + 1].ids();
        for y in 0..h {
            for x in 0..w {
                let id = clip.masks[t].id(y, x);
                if id == 0 {
                    continue;
                }
                let [dx, dy] = clip.flow[t][y * w + x];
                let (ty, tx) = ((y as i32 + dy) as usize, (x as i32 + dx) as usize);
                // skip pixels covered by a later patch in the next frame
                if next_ids[ty * w + tx] == id {
                    assert_eq!(clip.frames[t].pixel(y, x), clip.frames[t + 1].pixel(ty, tx));
                }
            }
        }
    }
}

#[test]
fn checkpoint_reload_propagates_identically() {
    let cfg = TrainConfig {
        total_steps: 3,
        batch_size: 2,
        palette_sample: 3000,
        ..TrainConfig::tiny()
    };
    let videos = (0..3)
        .map(|i| Video {
            name: i.to_string(),
            frames: generate_clip(&SyntheticSpec::default(), 70 + i).unwrap().frames,
        })
        .collect();
    let mut tr = Trainer::new(cfg.clone(), Dataset::prepare(videos, &cfg).unwrap()).unwrap();
    tr.run(|_, _| Ok(())).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.cflw");
    save_checkpoint(&path, &tr.checkpoint(BTreeMap::from([("preset".to_string(), "tiny".to_string())]))).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.step, 3);
    for (a, b) in ck.encoder.tensors().iter().zip(tr.params().tensors()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(ck.encoder.norm_stats(), tr.params().norm_stats());
    assert_eq!(ck.config["preset"], "tiny");

    let clip = generate_clip(&SyntheticSpec::default(), 99).unwrap();
    let ann = Annotation::Mask(clip.masks[0].clone());
    let cfg = PropagationConfig::default();
    assert_eq!(
        propagate_video(&clip.frames, &ann, &ck.encoder, &cfg).unwrap(),
        propagate_video(&clip.frames, &ann, tr.params(), &cfg).unwrap()
    );
}

/// One-hot features that travel with a patch: cells of the patch keep their
/// code from frame to frame, background cells get their own codes.
fn moving_patch_features(frames: usize, step_cells: usize) -> Vec<FeatureMap<f64>> {
    let (h, w) = (6usize, 12usize);
    let codes = h * w + 4;
    (0..frames)
        .map(|t| {
            let mut v = vec![0.0; h * w * codes];
            for i in 0..h {
                for j in 0..w {
                    let x0 = 1 + t * step_cells;
                    let code = if (2..4).contains(&i) && (x0..x0 + 2).contains(&j) {
                        h * w + (i - 2) * 2 + (j - x0)
                    } else {
                        i * w + j
                    };
                    v[(i * w + j) * codes + code] = 1.0;
                }
            }
            FeatureMap::new(h, w, codes, v).unwrap()
        })
        .collect()
}

#[test]
fn keypoint_tracks_patch_moving_eight_pixels_per_frame() {
    let features = moving_patch_features(4, 2);
    let start = Keypoint {
        frame: 0,
        id: 0,
        x: 8.0,
        y: 12.0,
        visible: true,
    };
    let out = propagate_features(&features, &Annotation::Keypoints(vec![start]), 24, 48, &PropagationConfig::default()).unwrap();
    let Propagated::Keypoints(points) = out else { panic!("keypoint mode") };
    assert_eq!(points.len(), 4);
    for p in &points {
        let want = 8.0 + 8.0 * p.frame as f64;
        assert!((p.x - want).abs() <= 4.0 && (p.y - 12.0).abs() <= 4.0, "{p:?}");
    }
}
