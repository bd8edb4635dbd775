//! Split determinism and per-class stratification on a generated image tree.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use distillkit::data::{scan_and_split, test_count, DatasetManifest};
use image::{Rgb, RgbImage};

use crate::Outcome;

pub const CLASS_SIZES: [usize; 7] = [1, 2, 3, 5, 8, 13, 20];
pub const RATIO: f64 = 0.8;

/// Class directories `c0..` holding tiny PNGs; also a stray text file.
pub fn write_tree(root: &Path, sizes: &[usize]) -> Result<(), String> {
    for (c, &n) in sizes.iter().enumerate() {
        let dir = root.join(format!("c{c}"));
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        for i in 0..n {
            let img = RgbImage::from_pixel(4, 4, Rgb([c as u8 * 30, i as u8 * 10, 7]));
            img.save(dir.join(format!("img{i:02}.png"))).map_err(|e| e.to_string())?;
        }
        fs::write(dir.join("notes.txt"), "not an image").map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn paths(m: &DatasetManifest, label: usize) -> BTreeSet<String> {
    m.samples.iter().filter(|s| s.label == label).map(|s| s.path.clone()).collect()
}

/// `a` and `b` must be empty directories; the same tree is written to both.
pub fn check_split(a: &Path, b: &Path, seed: u64) -> Outcome {
    write_tree(a, &CLASS_SIZES)?;
    write_tree(b, &CLASS_SIZES)?;
    let run = |root: &Path| scan_and_split(root, seed, RATIO).map_err(|e| e.to_string());
    let (train1, test1) = run(a)?;
    let (train2, test2) = run(a)?;
    if train1.to_json() != train2.to_json() || test1.to_json() != test2.to_json() {
        return Err("two scans of the same tree produced different manifests".into());
    }
    let (train3, test3) = run(b)?;
    if train1.samples != train3.samples || test1.samples != test3.samples {
        return Err("identical trees at different roots split differently".into());
    }
    for (label, &n) in CLASS_SIZES.iter().enumerate() {
        let (tr, te) = (paths(&train1, label), paths(&test1, label));
        if tr.len() + te.len() != n || !tr.is_disjoint(&te) {
            return Err(format!("class {label}: {} train + {} test for {n} images", tr.len(), te.len()));
        }
        let want_test = n as f64 * (1.0 - RATIO);
        if (te.len() as f64 - want_test).abs() > 1.0 || (tr.len() as f64 - n as f64 * RATIO).abs() > 1.0 {
            return Err(format!("class {label}: {}/{} split of {n} is off by more than one", tr.len(), te.len()));
        }
    }
    for n in 1..=20 {
        let t = test_count(n, RATIO);
        if (t as f64 - 0.2 * n as f64).abs() > 1.0 || t > n {
            return Err(format!("test_count({n}) = {t}"));
        }
    }
    let other = scan_and_split(a, seed + 1, RATIO).map_err(|e| e.to_string())?.1;
    let reshuffled = other.samples != test1.samples;
    Ok(format!(
        "{} classes, {} train / {} test, byte-identical rescans, seed+1 reshuffles: {reshuffled}",
        CLASS_SIZES.len(),
        train1.len(),
        test1.len()
    ))
}
