//! Fixtures and independent reference implementations shared by the
//! integration tests. Nothing here calls the library routine it checks.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use image::{Rgb, RgbImage};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use scenesynth::dataset_io::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use scenesynth::geometry::{BBox, ScoredBox};
use scenesynth::oracle::{canonical_key, FileOracle, TableEntry};
use serde_json::{json, Map, Value};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Random valid box with integer-ish or fractional coordinates inside `extent`.
pub fn random_box(rng: &mut StdRng, extent: f64) -> BBox {
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    let x = rng.gen_range(0.0..extent - w);
    let y = rng.gen_range(0.0..extent - h);
    BBox::new(x, y, w, h).unwrap()
}

/// IoU from first principles on XYWH boxes.
pub fn reference_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Greedy suppression by repeated linear scans for the best remaining box.
pub fn brute_force_nms(c: &[ScoredBox], thr: f64) -> Vec<usize> {
    let mut done = vec![false; c.len()];
    let mut kept: Vec<usize> = Vec::new();
    for _ in 0..c.len() {
        let mut best: Option<usize> = None;
        for i in 0..c.len() {
            if done[i] {
                continue;
            }
            best = match best {
                Some(b) if c[b].score >= c[i].score => Some(b),
                _ => Some(i),
            };
        }
        let i = best.unwrap();
        done[i] = true;
        if kept.iter().all(|&k| reference_iou(&c[k].bbox, &c[i].bbox) <= thr) {
            kept.push(i);
        }
    }
    kept
}

/// Per-class suppression from the brute-force reference, merged by score.
pub fn brute_force_per_class_nms(c: &[ScoredBox], thr: f64) -> Vec<usize> {
    let mut classes: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, b) in c.iter().enumerate() {
        classes.entry(b.class_id).or_default().push(i);
    }
    let mut kept = Vec::new();
    for members in classes.values() {
        let sub: Vec<ScoredBox> = members.iter().map(|&i| c[i]).collect();
        kept.extend(brute_force_nms(&sub, thr).into_iter().map(|j| members[j]));
    }
    kept.sort_by(|&a, &b| c[b].score.partial_cmp(&c[a].score).unwrap().then(a.cmp(&b)));
    kept
}

/// Oracle table over subsets of a small candidate list, keyed by bitmask.
#[derive(Debug, Clone)]
pub struct SubsetTable {
    pub image_id: u64,
    pub label: u64,
    pub other: u64,
    pub candidates: Vec<BBox>,
    /// (confidence of `label`, top class) per removed-subset bitmask.
    pub answers: Vec<(f64, u64)>,
}

impl SubsetTable {
    pub fn answer(&self, mask: usize) -> (f64, u64) {
        self.answers[mask]
    }

    pub fn mask_of(&self, boxes: &[BBox]) -> Option<usize> {
        let mut mask = 0;
        for b in boxes {
            let i = self.candidates.iter().position(|c| c == b)?;
            mask |= 1 << i;
        }
        Some(mask)
    }

    pub fn file_oracle(&self) -> FileOracle {
        let n = self.candidates.len();
        let entries = (0..1usize << n).map(|mask| {
            let mut boxes: Vec<BBox> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| self.candidates[i]).collect();
            boxes.sort_by(|a, b| a.canonical_cmp(b));
            let (confidence, top_class) = self.answers[mask];
            (canonical_key(self.image_id, &boxes), TableEntry { confidence, top_class })
        });
        FileOracle::from_entries(entries).unwrap()
    }
}

/// Random tabulated fixture: each removed box subtracts its own drop from a
/// baseline, with a chance that the label loses the top spot once
/// confidence falls below a per-fixture level. Drops are quantized so ties
/// in the ranking occur.
pub fn random_subset_table(rng: &mut StdRng, image_id: u64, n: usize) -> SubsetTable {
    let label = 7;
    let other = 3;
    let mut candidates = Vec::new();
    while candidates.len() < n {
        let b = random_box(rng, 200.0);
        let b = BBox::new(b.x.round(), b.y.round(), b.w.round().max(1.0), b.h.round().max(1.0)).unwrap();
        if !candidates.contains(&b) {
            candidates.push(b);
        }
    }
    let baseline: f64 = rng.gen_range(0.5..1.0);
    let drops: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8u32)) * 0.05).collect();
    let flip_level = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.6) } else { -1.0 };
    let baseline_wrong = rng.gen_bool(0.05);
    let answers = (0..1usize << n)
        .map(|mask| {
            let removed: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| drops[i]).sum();
            let conf = (baseline - removed).max(0.01);
            let flipped = conf < flip_level || (mask == 0 && baseline_wrong);
            (conf, if flipped { other } else { label })
        })
        .collect();
    SubsetTable { image_id, label, other, candidates, answers }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BruteStop {
    Flip,
    Ratio,
    Exhausted,
    Empty,
    Baseline,
}

/// Localization by exhaustive search: of all orderings of the candidates,
/// keep the one whose single-removal drops are non-increasing with ties in
/// index order, then walk it until a stop rule fires.
pub fn brute_force_lore(table: &SubsetTable, ratio_threshold: f64) -> (Vec<BBox>, BruteStop) {
    let n = table.candidates.len();
    if n == 0 {
        return (Vec::new(), BruteStop::Empty);
    }
    let (base_conf, base_top) = table.answer(0);
    if base_top != table.label || base_conf <= 0.0 {
        return (Vec::new(), BruteStop::Baseline);
    }
    let drop = |i: usize| base_conf - table.answer(1 << i).0;
    let mut order: Option<Vec<usize>> = None;
    for perm in permutations(n) {
        let respects = perm.windows(2).all(|w| {
            let (a, b) = (drop(w[0]), drop(w[1]));
            a > b || (a == b && w[0] < w[1])
        });
        if respects {
            assert!(order.is_none(), "ranking rule admits two orderings");
            order = Some(perm);
        }
    }
    let order = order.expect("ranking rule admits one ordering");
    let mut mask = 0;
    let mut removed = Vec::new();
    for i in order {
        mask |= 1 << i;
        removed.push(table.candidates[i]);
        let (conf, top) = table.answer(mask);
        if top != table.label {
            return (removed, BruteStop::Flip);
        }
        if 1.0 - conf / base_conf >= ratio_threshold {
            return (removed, BruteStop::Ratio);
        }
    }
    (removed, BruteStop::Exhausted)
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Bilinear resize as two dense weight matrices, `out = Wy * img * Wx^T`,
/// sample centers at half-integers and edge positions clamped.
#[allow(clippy::needless_range_loop)]
pub fn reference_bilinear(src: &RgbImage, dst_w: u32, dst_h: u32) -> RgbImage {
    fn weights(dst: usize, src: usize) -> Vec<Vec<f64>> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                (0..src).map(|s| (1.0 - (pos - s as f64).abs()).max(0.0)).collect()
            })
            .collect()
    }
    let (sw, sh) = (src.width() as usize, src.height() as usize);
    let wx = weights(dst_w as usize, sw);
    let wy = weights(dst_h as usize, sh);
    let mut out = RgbImage::new(dst_w, dst_h);
    for c in 0..3 {
        // rows first: tmp[sy][dx]
        let tmp: Vec<Vec<f64>> = (0..sh)
            .map(|sy| {
                (0..dst_w as usize)
                    .map(|dx| (0..sw).map(|sx| wx[dx][sx] * f64::from(src.get_pixel(sx as u32, sy as u32)[c])).sum())
                    .collect()
            })
            .collect();
        for dy in 0..dst_h as usize {
            for dx in 0..dst_w as usize {
                let v: f64 = (0..sh).map(|sy| wy[dy][sy] * tmp[sy][dx]).sum();
                out.get_pixel_mut(dx as u32, dy as u32)[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

pub fn gradient_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let (a, b, c): (u32, u32, u32) = (r.gen_range(1..7), r.gen_range(1..7), r.gen_range(0..255));
    RgbImage::from_fn(w, h, |x, y| {
        Rgb([((x * a + y) % 256) as u8, ((y * b + x / 2) % 256) as u8, ((x * y + c) % 256) as u8])
    })
}

/// Synthetic mini-LVIS: `images` images, classes with the given image
/// counts (class `k` has id `k + 1` and appears in images `0..counts[k]`,
/// one box each).
pub fn mini_lvis(images: u64, class_image_counts: &[u64]) -> CocoDataset {
    let mut d = CocoDataset::default();
    for i in 0..images {
        let mut img = CocoImage::new(i + 1, format!("train/{:06}.jpg", i + 1), 640, 480);
        img.extra.insert("coco_url".into(), Value::String(format!("http://example.invalid/{}", i + 1)));
        d.images.push(img);
    }
    for (k, &n) in class_image_counts.iter().enumerate() {
        let mut cat = CocoCategory::new(k as u64 + 1, format!("class_{k}"));
        cat.synset = Some(format!("n{:08}", 1000 + k));
        cat.extra.insert("frequency".into(), Value::String("r".into()));
        d.categories.push(cat);
        for i in 0..n.min(images) {
            let id = d.annotations.len() as u64 + 1;
            let bbox = [(k as f64 * 3.5) % 500.0, (i as f64 * 1.25) % 400.0, 10.0 + (k % 7) as f64, 12.5];
            d.annotations.push(CocoAnnotation {
                id,
                image_id: i + 1,
                category_id: k as u64 + 1,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: Some(0),
                strategy: None,
                source_score: None,
                extra: Map::new(),
            });
        }
    }
    d
}

/// Writes an object-centric catalog: `per_class` solid-ish images for each
/// class id, sized between 40 and 90 pixels. Returns the catalog path.
pub fn write_catalog(dir: &Path, classes: &[(u64, &str)], per_class: usize) -> std::path::PathBuf {
    let img_dir = dir.join("oci");
    std::fs::create_dir_all(&img_dir).unwrap();
    let mut entries = Vec::new();
    for &(class_id, name) in classes {
        let mut paths = Vec::new();
        for j in 0..per_class {
            let w = 40 + ((class_id as u32 * 13 + j as u32 * 7) % 50);
            let h = 40 + ((class_id as u32 * 5 + j as u32 * 11) % 50);
            let rel = format!("oci/{name}_{j}.png");
            gradient_image(w, h, class_id * 100 + j as u64).save(dir.join(&rel)).unwrap();
            paths.push(rel);
        }
        entries.push(json!({
            "class_id": class_id,
            "name": name,
            "synset_id": format!("n{:08}", 1000 + class_id - 1),
            "image_paths": paths,
        }));
    }
    let path = dir.join("catalog.json");
    std::fs::write(&path, serde_json::to_string_pretty(&entries).unwrap()).unwrap();
    path
}

/// Scripted `/classify` service answering from a [`SubsetTable`] per image.
pub struct StubServer {
    pub url: String,
    pub hits: Arc<Mutex<HashMap<(u64, usize), usize>>>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(tables: Vec<SubsetTable>) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let port = server.server_addr().to_ip().unwrap().port();
        let hits: Arc<Mutex<HashMap<(u64, usize), usize>>> = Arc::default();
        let by_image: HashMap<u64, SubsetTable> = tables.into_iter().map(|t| (t.image_id, t)).collect();
        let (srv, counter) = (Arc::clone(&server), Arc::clone(&hits));
        let handle = std::thread::spawn(move || {
            for mut request in srv.incoming_requests() {
                let mut body = String::new();
                request.as_reader().read_to_string(&mut body).unwrap();
                let (status, reply) = respond(&by_image, &counter, request.url(), &body);
                let response = tiny_http::Response::from_string(reply)
                    .with_status_code(status)
                    .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
                let _ = request.respond(response);
            }
        });
        StubServer { url: format!("http://127.0.0.1:{port}"), hits, server, handle: Some(handle) }
    }

    pub fn total_hits(&self) -> usize {
        self.hits.lock().unwrap().values().sum()
    }
}

fn respond(
    tables: &HashMap<u64, SubsetTable>,
    hits: &Mutex<HashMap<(u64, usize), usize>>,
    url: &str,
    body: &str,
) -> (u16, String) {
    if url != "/classify" {
        return (404, "{}".into());
    }
    let req: Value = serde_json::from_str(body).unwrap();
    let image_id = req["image_id"].as_u64().unwrap();
    assert_eq!(req["patch_color"], json!([128, 128, 128]));
    let Some(table) = tables.get(&image_id) else {
        return (404, r#"{"error":"unknown image"}"#.into());
    };
    let boxes: Vec<BBox> =
        req["removed_boxes"].as_array().unwrap().iter().map(|b| serde_json::from_value(b.clone()).unwrap()).collect();
    let Some(mask) = table.mask_of(&boxes) else {
        return (422, r#"{"error":"unknown box"}"#.into());
    };
    *hits.lock().unwrap().entry((image_id, mask)).or_default() += 1;
    let (conf, top) = table.answer(mask);
    let other_conf = if top == table.label { conf / 2.0 } else { (conf + 0.05).min(1.0).max(conf + 1e-6) };
    let mut confidences = Map::new();
    confidences.insert(table.label.to_string(), json!(conf));
    confidences.insert(table.other.to_string(), json!(other_conf));
    (200, json!({ "confidences": confidences }).to_string())
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
