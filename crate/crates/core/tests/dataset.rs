#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::Path;

use resvm::dataset::{
    image_size_stats, load_images, normalized_entropy, scan_image_directory, stratified_split,
    synth_dataset_generate, AnalysisReport, Split, SynthConfig,
};
use resvm::Error;

fn write_png(path: &Path, w: u32, h: u32) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30]))
        .save(path)
        .unwrap();
}

fn tree(root: &Path, classes: &[&str], per_class: usize) {
    for c in classes {
        for i in 0..per_class {
            write_png(&root.join(c).join(format!("{i:02}.png")), 8, 6);
        }
    }
}

#[test]
fn three_dirs_of_two_files() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), &["b", "a", "c"], 2);
    let idx = scan_image_directory(dir.path()).unwrap();
    assert_eq!(idx.records.len(), 6);
    assert_eq!(idx.classes, ["a", "b", "c"]);
    assert_eq!(idx.records[0].path, "a/00.png");
    assert_eq!(idx.records[0].size, (6, 8));
    assert_eq!(idx.class_counts(), [2, 2, 2]);
    assert_eq!(scan_image_directory(dir.path()).unwrap(), idx);
}

#[test]
fn junk_and_unreadable_files() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), &["x", "y"], 1);
    fs::write(dir.path().join("x/notes.txt"), "hello").unwrap();
    fs::write(dir.path().join("x/thumbs.db"), [0u8; 16]).unwrap();
    fs::write(dir.path().join("y/broken.png"), b"not a png").unwrap();
    write_png(&dir.path().join("y/UPPER.JPG.png"), 4, 4);
    fs::write(
        dir.path().join("stray.png"),
        b"top-level files are not classes",
    )
    .unwrap();
    let idx = scan_image_directory(dir.path()).unwrap();
    let paths: Vec<_> = idx.records.iter().map(|r| r.path.as_str()).collect();
    assert_eq!(paths, ["x/00.png", "y/00.png", "y/UPPER.JPG.png"]);
    assert_eq!(idx.skipped.len(), 1);
    assert!(idx.skipped[0].ends_with("y/broken.png"));
}

#[test]
fn empty_roots_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        scan_image_directory(dir.path()),
        Err(Error::Dataset(_))
    ));
    fs::create_dir(dir.path().join("empty_class")).unwrap();
    fs::write(dir.path().join("empty_class/readme.md"), "").unwrap();
    assert!(matches!(
        scan_image_directory(dir.path()),
        Err(Error::Dataset(_))
    ));
    assert!(matches!(
        scan_image_directory(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn seven_three_split() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), &["a", "b", "c"], 10);
    let idx = scan_image_directory(dir.path()).unwrap();
    let out = stratified_split(&idx, 0.7, 42).unwrap();
    assert!(out.unsplit.is_empty());
    assert_eq!(out.index.split_counts(Split::Train), [7, 7, 7]);
    assert_eq!(out.index.split_counts(Split::Val), [3, 3, 3]);
    let again = stratified_split(&idx, 0.7, 42).unwrap();
    assert_eq!(out.index.split_list(), again.index.split_list());
    let other = stratified_split(&idx, 0.7, 43).unwrap();
    assert_ne!(out.index.split_list(), other.index.split_list());
}

#[test]
fn nine_images_round_to_six_three() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), &["only"], 9);
    let idx = scan_image_directory(dir.path()).unwrap();
    let out = stratified_split(&idx, 0.7, 0).unwrap();
    assert_eq!(out.index.split_counts(Split::Train), [6]);
    assert_eq!(out.index.split_counts(Split::Val), [3]);
}

#[test]
fn tiny_classes_stay_in_train() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), &["big"], 4);
    tree(dir.path(), &["lonely"], 1);
    let idx = scan_image_directory(dir.path()).unwrap();
    let out = stratified_split(&idx, 0.7, 1).unwrap();
    assert_eq!(out.unsplit, ["lonely"]);
    assert_eq!(out.index.split_counts(Split::Train), [3, 1]);
    assert!(stratified_split(&idx, 1.0, 1).is_err());
    assert!(stratified_split(&idx, 0.0, 1).is_err());
}

#[test]
fn test_records_are_untouched_by_split() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), &["a"], 5);
    let idx = scan_image_directory(dir.path())
        .unwrap()
        .assign_all(Split::Test);
    let out = stratified_split(&idx, 0.7, 3).unwrap();
    assert!(out.index.records.iter().all(|r| r.split == Split::Test));
}

#[test]
fn split_list_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), &["a", "b"], 5);
    let idx = scan_image_directory(dir.path()).unwrap();
    let split = stratified_split(&idx, 0.7, 9).unwrap().index;
    let text = split.split_list();
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
    let mut lines: Vec<&str> = text.lines().collect();
    let sorted = {
        let mut s = lines.clone();
        s.sort();
        s
    };
    assert_eq!(lines, sorted);
    let list = dir.path().join("split.txt");
    split.write_split_list(&list).unwrap();
    let back = idx.clone().read_split_list(&list).unwrap();
    assert_eq!(back, split);

    lines.pop();
    let short = lines.join("\n");
    assert!(idx.clone().apply_split_list(&short, &list).is_err());
    let extra = format!("{text}zzz/none.png\ttrain\n");
    assert!(idx.clone().apply_split_list(&extra, &list).is_err());
    let bad = text
        .replacen("\ttrain", "\tholdout", 1)
        .replacen("\tval", "\tholdout", 1);
    assert!(idx.apply_split_list(&bad, &list).is_err());
}

#[test]
fn size_stats_skip_unreadable() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("a/1.png"), 100, 100);
    write_png(&dir.path().join("a/2.png"), 300, 300);
    fs::write(dir.path().join("a/3.jpg"), b"garbage").unwrap();
    let idx = scan_image_directory(dir.path()).unwrap();
    let (stats, failed) = image_size_stats(&idx);
    let stats = stats.unwrap();
    assert_eq!((stats.mean_h, stats.std_h), (200.0, 100.0));
    assert_eq!((stats.max_w, stats.min_w), (300, 100));
    assert_eq!(failed.len(), 1);
}

fn centroid_accuracy(images: &resvm::Tensor<f32>, labels: &[usize], classes: usize) -> f64 {
    let n = labels.len();
    let row = images.data().len() / n;
    let x = |i: usize| &images.data()[i * row..(i + 1) * row];
    // Leave-one-out so an image never votes for itself.
    let mut sums = vec![vec![0.0f64; row]; classes];
    let mut counts = vec![0usize; classes];
    for i in 0..n {
        counts[labels[i]] += 1;
        for (s, &v) in sums[labels[i]].iter_mut().zip(x(i)) {
            *s += f64::from(v);
        }
    }
    let mut hits = 0;
    for i in 0..n {
        let best = (0..classes)
            .map(|c| {
                let own = usize::from(c == labels[i]);
                let m = (counts[c] - own) as f64;
                let dist: f64 = sums[c]
                    .iter()
                    .zip(x(i))
                    .map(|(&s, &v)| {
                        let centroid = (s - own as f64 * f64::from(v)) / m;
                        (centroid - f64::from(v)).powi(2)
                    })
                    .sum();
                (dist, c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        hits += usize::from(best == labels[i]);
    }
    hits as f64 / n as f64
}

#[test]
fn synthetic_dataset_is_fine_grained() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let idx = synth_dataset_generate(&cfg, dir.path()).unwrap();
    assert_eq!(idx.records.len(), 256);
    assert_eq!(idx.num_classes(), 4);
    assert_eq!(normalized_entropy(&idx.class_counts()).unwrap(), 1.0);

    let data = load_images(&idx, Split::Train, 32).unwrap();
    assert_eq!(data.images.shape(), &[256, 3, 32, 32]);
    let acc = centroid_accuracy(&data.images, &data.labels, 4);
    eprintln!("nearest-centroid accuracy {acc:.3}");
    assert!(acc > 0.25 + 0.1 && acc < 1.0, "{acc}");

    let again = tempfile::tempdir().unwrap();
    synth_dataset_generate(&cfg, again.path()).unwrap();
    for r in &idx.records {
        let a = fs::read(dir.path().join(&r.path)).unwrap();
        let b = fs::read(again.path().join(&r.path)).unwrap();
        assert_eq!(a, b, "{}", r.path);
    }
    let report = AnalysisReport::build(&idx);
    assert!(report.render().contains("normalized entropy: 1.0000"));
    assert!(report.render().contains("32±0.00×32±0.00"));
}

#[test]
fn synth_rejects_bad_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        size: 30,
        ..SynthConfig::default()
    };
    assert!(matches!(
        synth_dataset_generate(&cfg, dir.path()),
        Err(Error::Config(_))
    ));
}
