//! Regenerates the files under `data/`.
//!
//! ```text
//! cargo run --release -p grff --example prepare_data -- <out-dir> [<mnist-json-dir>]
//! ```
//!
//! MONK's problems are generated from their attribute domains and target
//! rules. The MNIST subset is converted from per-digit JSON arrays of
//! `pixel/255` values (one `<digit>.json` per class, `{"data": [...]}`).

use std::path::{Path, PathBuf};

use grff::data::{monks, write_idx_images, write_idx_labels, write_sparse_text};
use grff::generator::{derive_seed, streams};
use grff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_200_417;
const MNIST_TRAIN: usize = 8_000;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("data", String::as_str));
    let m = out.join("monks");
    std::fs::create_dir_all(&m)?;
    for (name, problem, n, noise) in [
        ("monks1", monks::Problem::One, 124, 0.0),
        ("monks2", monks::Problem::Two, 169, 0.0),
        ("monks3", monks::Problem::Three, 122, 0.05),
    ] {
        let (train, test) = monks::generate(problem, n, noise, derive_seed(SEED, n as u64))?;
        write_sparse_text(&train, &m.join(format!("{name}.train")))?;
        write_sparse_text(&test, &m.join(format!("{name}.test")))?;
        println!("{name}: {} train, {} test", train.len(), test.len());
    }
    if let Some(json) = args.get(1) {
        mnist(Path::new(json), &out.join("mnist"))?;
    }
    Ok(())
}

fn mnist(src: &Path, out: &Path) -> Result<(), Box<dyn std::error::Error>> {
    #[derive(serde::Deserialize)]
    struct Digits {
        data: Vec<f64>,
    }
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for digit in 0..10 {
        let text = std::fs::read_to_string(src.join(format!("{digit}.json")))?;
        let d: Digits = serde_json::from_str(&text)?;
        for img in d.data.chunks(784) {
            images.push(img.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0)).collect());
            labels.push(digit);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    rng.set_stream(streams::SHUFFLE);
    let mut idx: Vec<usize> = (0..images.len()).collect();
    idx.shuffle(&mut rng);
    std::fs::create_dir_all(out)?;
    for (name, part) in [("train", &idx[..MNIST_TRAIN]), ("test", &idx[MNIST_TRAIN..])] {
        let data: Vec<f64> = part.iter().flat_map(|&i| images[i].iter().copied()).collect();
        let x = Tensor::new(vec![part.len(), 1, 28, 28], data)?;
        let y: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
        write_idx_images(&x, &out.join(format!("{name}-images.idx.gz")))?;
        write_idx_labels(&y, &out.join(format!("{name}-labels.idx.gz")))?;
        println!("mnist {name}: {}", part.len());
    }
    Ok(())
}
