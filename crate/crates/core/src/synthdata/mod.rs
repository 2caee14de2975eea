//! Synthetic foreground/background re-identification corpus.
//!
//! Each image shows a two-colour person rectangle (colours fixed per
//! identity) over a textured scene, optionally crossed by a gray occluder
//! bar. Foreground captions name the identity colours; background captions
//! name the scene and the occluder.

mod sampler;
mod vocab;

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use sampler::{pk_sample, Batch, PkSampler};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const IMAGE_DIR: &str = "images";

const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.12, 0.12]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.85, 0.15]),
    ("cyan", [0.15, 0.8, 0.85]),
    ("magenta", [0.8, 0.15, 0.75]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.45, 0.15, 0.6]),
];

const SCENES: [(&str, [f64; 3], [f64; 3]); 4] = [
    ("street", [0.38, 0.38, 0.42], [0.26, 0.26, 0.3]),
    ("park", [0.3, 0.5, 0.25], [0.22, 0.38, 0.18]),
    ("wall", [0.6, 0.35, 0.28], [0.45, 0.25, 0.2]),
    ("indoor", [0.72, 0.66, 0.55], [0.6, 0.55, 0.45]),
];

const OCCLUDER_GRAY: [f64; 3] = [0.5, 0.5, 0.5];

/// splitmix64 over (seed, stream): independent per-index RNG seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// corpus directory (images/, manifest.jsonl, vocab.txt)
    pub root: String,
    pub num_ids: usize,
    pub images_per_id: usize,
    pub num_cameras: usize,
    pub num_scenes: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub occluder_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// identities `0..train_ids` train; the rest form query/gallery
    pub train_ids: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            root: "corpus".into(),
            num_ids: 32,
            images_per_id: 8,
            num_cameras: 4,
            num_scenes: 4,
            image_height: 32,
            image_width: 16,
            occluder_prob: 0.3,
            noise_sigma: 0.05,
            seed: 0,
            train_ids: 16,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("data: {m}")));
        if self.images_per_id < 2 {
            return fail("images_per_id must be >= 2");
        }
        if self.num_cameras < 2 {
            return fail("num_cameras must be >= 2");
        }
        if self.num_scenes == 0 || self.num_ids == 0 {
            return fail("num_ids and num_scenes must be positive");
        }
        if self.num_ids > COLORS.len() * COLORS.len() {
            return fail("more identities than distinct colour pairs (64)");
        }
        if self.image_height < 12 || self.image_width < 8 {
            return fail("images must be at least 12 x 8");
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) || !(self.noise_sigma >= 0.0) {
            return fail("occluder_prob must be in [0, 1] and noise_sigma >= 0");
        }
        if self.train_ids == 0 || self.train_ids >= self.num_ids {
            return fail("train_ids must be in 1..num_ids");
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// path relative to the corpus root
    pub image: String,
    pub pid: usize,
    /// -1 when camera labels are unavailable
    pub camid: i64,
    pub fg_tokens: Vec<usize>,
    pub bg_tokens: Vec<usize>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn scene_name(k: usize) -> String {
    SCENES.get(k).map_or_else(|| format!("scene{k}"), |s| s.0.to_string())
}

fn scene_colors(k: usize) -> ([f64; 3], [f64; 3]) {
    match SCENES.get(k) {
        Some(&(_, a, b)) => (a, b),
        None => {
            let t = (k as f64 * 0.37).fract();
            ([0.3 + 0.4 * t, 0.5 - 0.2 * t, 0.4], [0.2 + 0.3 * t, 0.35, 0.3 - 0.1 * t])
        }
    }
}

/// The vocabulary the generator's captions draw from.
pub fn build_vocab(num_scenes: usize) -> Vocab {
    let mut words: Vec<String> = [
        "<sos>", "<eos>", "person", "in", "top", "and", "bottom", "background", "with", "gray", "bar", "no", "front",
    ]
        .iter()
        .map(|s| s.to_string())
        .collect();
    words.extend(COLORS.iter().map(|c| c.0.to_string()));
    words.extend((0..num_scenes).map(scene_name));
    Vocab::new(words).expect("generator vocabulary is well formed")
}

/// (upper, lower) colour indices; distinct pairs for pid < 64.
pub fn identity_colors(pid: usize) -> (usize, usize) {
    let n = COLORS.len();
    let upper = pid % n;
    (upper, (upper + pid / n + 1) % n)
}

pub fn foreground_caption(pid: usize) -> Vec<&'static str> {
    let (u, l) = identity_colors(pid);
    vec!["person", "in", COLORS[u].0, "top", "and", COLORS[l].0, "bottom"]
}

pub fn background_caption(scene: usize, occluded: bool) -> Vec<String> {
    let middle: &[&str] = if occluded { &["with", "gray", "bar"] } else { &["with", "no", "bar"] };
    let mut w = vec![scene_name(scene), "background".to_string()];
    w.extend(middle.iter().chain(&["in", "front"]).map(|s| s.to_string()));
    w
}

/// One rendered sample before it is written to disk.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    pub pid: usize,
    pub camid: usize,
    pub scene: usize,
    pub occluded: bool,
}

/// Render image `index` of the corpus. Depends only on (cfg, index).
pub fn render_sample(cfg: &CorpusConfig, index: usize) -> Rendered {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let pid = index / cfg.images_per_id;
    let camid = (index % cfg.images_per_id) % cfg.num_cameras;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let scene = rng.random_range(0..cfg.num_scenes);
    let occluded = rng.random_bool(cfg.occluder_prob);

    // per-camera illumination
    let tint = 0.85 + 0.3 * (camid as f64 / cfg.num_cameras as f64);
    let (bg_a, bg_b) = scene_colors(scene);
    let phase = rng.random_range(0..4usize);
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let alt = match scene % 4 {
                0 => (y + phase) / 3 % 2 == 0,
                1 => (x + phase) / 2 % 2 == 0,
                2 => ((x + phase) / 4 + y / 4) % 2 == 0,
                _ => y * 2 < h + phase,
            };
            let c = if alt { bg_a } else { bg_b };
            img.set_rgb(y, x, c.map(|v| v * tint));
        }
    }

    let ph = (h * 3 / 4).saturating_sub(rng.random_range(0..3)).max(4);
    let pw = (w / 2).saturating_sub(rng.random_range(0..2)).max(2);
    let y0 = rng.random_range(0..=(h - ph));
    let x0 = rng.random_range(0..=(w - pw));
    let (upper, lower) = identity_colors(pid);
    for y in y0..y0 + ph {
        let c = if y < y0 + ph / 2 { COLORS[upper].1 } else { COLORS[lower].1 };
        for x in x0..x0 + pw {
            img.set_rgb(y, x, c.map(|v| v * tint));
        }
    }

    if occluded {
        let bar_h = (ph / 4).max(2);
        let by = rng.random_range(y0..=(y0 + ph - bar_h));
        let bx0 = x0.saturating_sub(2);
        let bx1 = (x0 + pw + 2).min(w);
        for y in by..by + bar_h {
            for x in bx0..bx1 {
                img.set_rgb(y, x, OCCLUDER_GRAY);
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in img.data.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Rendered { image: img, pid, camid, scene, occluded }
}

/// Write a corpus under `out`: `images/NNNNN.ppm`, `manifest.jsonl`, `vocab.txt`.
pub fn generate_corpus(cfg: &CorpusConfig, out: &Path, max_text_len: usize) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let img_dir = out.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let vocab = build_vocab(cfg.num_scenes);
    let total = cfg.num_ids * cfg.images_per_id;
    let mut records = Vec::with_capacity(total);
    for index in 0..total {
        let r = render_sample(cfg, index);
        let rel = format!("{IMAGE_DIR}/{index:05}.ppm");
        r.image.write_ppm(&out.join(&rel))?;
        records.push(SampleRecord {
            image: rel,
            pid: r.pid,
            camid: r.camid as i64,
            fg_tokens: vocab.tokenize(&foreground_caption(r.pid), max_text_len)?,
            bg_tokens: vocab.tokenize(&background_caption(r.scene, r.occluded), max_text_len)?,
        });
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    let vpath = out.join(VOCAB_FILE);
    let mut f = fs::File::create(&vpath).map_err(|e| Error::io(&vpath, e))?;
    f.write_all(vocab.to_text().as_bytes()).map_err(|e| Error::io(&vpath, e))?;
    Ok(records)
}

/// A corpus on disk: root directory plus its manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let records = read_manifest(&root.join(MANIFEST_FILE))?;
        if records.is_empty() {
            return Err(Error::Data(format!("{} has an empty manifest", root.display())));
        }
        Ok(Self { root: root.to_path_buf(), records })
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    /// Records of identities `< train_ids`.
    pub fn train_records(&self, train_ids: usize) -> Vec<SampleRecord> {
        self.records.iter().filter(|r| r.pid < train_ids).cloned().collect()
    }

    /// Records of identities `>= train_ids`.
    pub fn test_records(&self, train_ids: usize) -> Vec<SampleRecord> {
        self.records.iter().filter(|r| r.pid >= train_ids).cloned().collect()
    }
}
