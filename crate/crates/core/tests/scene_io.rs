use std::fs;
use std::path::Path;

use occhuman::scene_io::{load_manifest, write_image, write_manifest, Image};
use occhuman::testutil::tiny_dataset;
use occhuman::Error;

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn manifest_round_trip_is_exact() {
    let ds = tiny_dataset(3, 8, 6);
    let a = tempfile::tempdir().unwrap();
    let path = write_manifest(&ds, a.path()).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.frames.len(), 3);
    assert_eq!(back.frames, ds.frames);
    assert_eq!(back.cameras, ds.cameras);
    assert_eq!(back.eval_views, ds.eval_views);
    assert_eq!(back.canonical_pose, ds.canonical_pose);
    assert_eq!(back.template.vertices, ds.template.vertices);
    assert_eq!(back.template.normals, ds.template.normals);

    let b = tempfile::tempdir().unwrap();
    write_manifest(&back, b.path()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
}

fn expect_frame_error(r: occhuman::Result<occhuman::scene_io::SceneDataset>, frame: usize, needle: &str) {
    match r {
        Err(Error::Frame { frame: f, message }) => {
            assert_eq!(f, frame, "{message}");
            assert!(message.contains(needle), "{message}");
        }
        other => panic!("expected frame error, got {other:?}"),
    }
}

#[test]
fn wrong_image_size_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(&tiny_dataset(3, 8, 6), dir.path()).unwrap();
    write_image(&dir.path().join("frames/0001.png"), &Image::new(7, 6)).unwrap();
    expect_frame_error(load_manifest(&path), 1, "7x6");
}

#[test]
fn bone_count_mismatch_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(&tiny_dataset(3, 8, 6), dir.path()).unwrap();
    let poses_path = dir.path().join("poses.json");
    let mut poses: serde_json::Value = serde_json::from_str(&fs::read_to_string(&poses_path).unwrap()).unwrap();
    poses["frames"][2]["rotations"].as_array_mut().unwrap().pop();
    fs::write(&poses_path, poses.to_string()).unwrap();
    expect_frame_error(load_manifest(&path), 2, "1 bones but template has 2");
}

#[test]
fn missing_image_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(&tiny_dataset(3, 8, 6), dir.path()).unwrap();
    fs::remove_file(dir.path().join("masks/0002.png")).unwrap();
    expect_frame_error(load_manifest(&path), 2, "0002.png");
}

#[test]
fn out_of_range_pixels_are_rejected_on_write() {
    let mut ds = tiny_dataset(2, 4, 4);
    ds.frames[1].image.data[5] = 1.5;
    let dir = tempfile::tempdir().unwrap();
    match write_manifest(&ds, dir.path()) {
        Err(Error::Frame { frame: 1, message }) => assert!(message.contains("1.5")),
        other => panic!("expected frame error, got {other:?}"),
    }
}

#[test]
fn undecodable_image_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(&tiny_dataset(2, 4, 4), dir.path()).unwrap();
    fs::write(dir.path().join("frames/0000.png"), b"not a png").unwrap();
    expect_frame_error(load_manifest(&path), 0, "0000.png");
}
