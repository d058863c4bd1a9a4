//! Line-based model files. Floats are stored as the hex digits of their IEEE
//! bits, so a save/load round trip is exact. The last line is a SHA-256 of
//! everything before it.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{Parameter, RunningStats};
use crate::data::MinMax;
use crate::error::{GrffError, Result};
use crate::generator::{Activation, GeneratorArchitecture, GeneratorParams, Linear, NoiseSpec, Norm};
use crate::model::{GrffNetwork, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &str = "grff-model";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_PREFIX: &str = "checksum sha256 ";

fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

struct Writer(String);

impl Writer {
    fn line(&mut self, parts: &[&str]) {
        self.0.push_str(&parts.join(" "));
        self.0.push('\n');
    }

    fn floats(&mut self, key: &str, name: &str, values: &[f64]) {
        self.0.push_str(key);
        self.0.push(' ');
        self.0.push_str(name);
        self.0.push(' ');
        self.0.push_str(&values.len().to_string());
        for v in values {
            self.0.push(' ');
            self.0.push_str(&hex_f64(*v));
        }
        self.0.push('\n');
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        self.0.push_str(&format!("tensor {name} {} {}", t.ndim(), dims.join(" ")));
        for v in t.data() {
            self.0.push(' ');
            self.0.push_str(&hex_f64(*v));
        }
        self.0.push('\n');
    }
}

/// Serializes parameters, running statistics, noise spec, frozen noise and
/// the normalization record. Optimizer state is not kept.
pub fn model_to_string(net: &GrffNetwork) -> String {
    let mut w = Writer(String::new());
    w.line(&[MAGIC]);
    w.line(&["version", &FORMAT_VERSION.to_string()]);
    match net.variant {
        Variant::Vector { dim } => w.line(&["variant", "vector", &dim.to_string()]),
        Variant::Image { channels, height, width } => w.line(&[
            "variant",
            "image",
            &channels.to_string(),
            &height.to_string(),
            &width.to_string(),
        ]),
    }
    w.line(&["classes", &net.num_classes.to_string()]);
    let d: Vec<String> = net.d_list.iter().map(|v| v.to_string()).collect();
    let mut dl = vec!["d_list"];
    dl.extend(d.iter().map(String::as_str));
    w.line(&dl);
    w.line(&["noise", &net.noise.noise_dim.to_string(), &net.noise.seed.to_string()]);
    w.line(&["input_scale", &hex_f64(net.input_scale)]);
    for (k, gen) in net.generators.iter().enumerate() {
        w.line(&["generator", &(k + 1).to_string(), if gen.frozen { "frozen" } else { "trainable" }]);
        let widths: Vec<String> = gen.arch.widths.iter().map(|v| v.to_string()).collect();
        let mut wl = vec!["widths"];
        wl.extend(widths.iter().map(String::as_str));
        w.line(&wl);
        match gen.arch.activation {
            Activation::LeakyRelu(s) => w.line(&["activation", "leaky_relu", &hex_f64(s)]),
            Activation::Relu => w.line(&["activation", "relu"]),
        }
        match gen.arch.kernel {
            Some((c, kh, kw)) => w.line(&["kernel", &c.to_string(), &kh.to_string(), &kw.to_string()]),
            None => w.line(&["kernel", "none"]),
        }
        for (i, l) in gen.linears.iter().enumerate() {
            w.tensor(&format!("linear{i}.weight"), l.weight.value());
            w.tensor(&format!("linear{i}.bias"), l.bias.value());
        }
        for (i, n) in gen.norms.iter().enumerate() {
            w.tensor(&format!("norm{i}.gamma"), n.gamma.value());
            w.tensor(&format!("norm{i}.beta"), n.beta.value());
            w.floats("stats", &format!("norm{i}.running_mean"), &n.running.mean);
            w.floats("stats", &format!("norm{i}.running_var"), &n.running.var);
        }
    }
    w.tensor("classifier.weight", net.classifier.weight.value());
    w.tensor("classifier.bias", net.classifier.bias.value());
    match &net.frozen_noise {
        Some(batches) => {
            w.line(&["frozen_noise", &batches.len().to_string()]);
            for (k, t) in batches.iter().enumerate() {
                w.tensor(&format!("noise{}", k + 1), t);
            }
        }
        None => w.line(&["frozen_noise", "none"]),
    }
    match &net.normalization {
        Some(mm) => {
            w.line(&["normalization", "minmax"]);
            w.floats("stats", "min", &mm.min);
            w.floats("stats", "max", &mm.max);
        }
        None => w.line(&["normalization", "none"]),
    }
    let digest = hex::encode(Sha256::digest(w.0.as_bytes()));
    w.0.push_str(CHECKSUM_PREFIX);
    w.0.push_str(&digest);
    w.0.push('\n');
    w.0
}

/// Atomic write of [`model_to_string`].
pub fn save_model(net: &GrffNetwork, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, model_to_string(net).as_bytes())
}

pub fn load_model(path: &Path) -> Result<GrffNetwork> {
    let mut bytes = Vec::new();
    crate::error::open_file(path)?.read_to_end(&mut bytes)?;
    let text = String::from_utf8(bytes).map_err(|_| GrffError::Checksum("model file is not valid UTF-8".into()))?;
    model_from_str(&text)
}

/// Checks header, version and checksum before decoding anything.
pub fn model_from_str(text: &str) -> Result<GrffNetwork> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(GrffError::Format("not a grff model file".into()));
    }
    let version = lines
        .next()
        .and_then(|l| l.strip_prefix("version "))
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| GrffError::Parse {
            line: 2,
            msg: "expected `version <n>`".into(),
        })?;
    if version != FORMAT_VERSION {
        return Err(GrffError::Migration {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body_end = text
        .trim_end_matches('\n')
        .rfind('\n')
        .map(|i| i + 1)
        .ok_or_else(|| GrffError::Checksum("file truncated".into()))?;
    let last = text[body_end..].trim_end_matches('\n');
    let stored = last
        .strip_prefix(CHECKSUM_PREFIX)
        .ok_or_else(|| GrffError::Checksum("checksum line missing; file truncated or edited".into()))?;
    let actual = hex::encode(Sha256::digest(&text.as_bytes()[..body_end]));
    if stored != actual || !text.ends_with('\n') {
        return Err(GrffError::Checksum(format!("stored {stored}, computed {actual}")));
    }
    Parser {
        lines: text[..body_end].lines().enumerate().skip(2).collect(),
        pos: 0,
    }
    .network()
}

struct Parser<'t> {
    lines: Vec<(usize, &'t str)>,
    pos: usize,
}

impl<'t> Parser<'t> {
    fn err(&self, msg: impl Into<String>) -> GrffError {
        let line = self.lines.get(self.pos.saturating_sub(1)).map_or(0, |l| l.0 + 1);
        GrffError::Parse { line, msg: msg.into() }
    }

    fn next(&mut self, key: &str) -> Result<Vec<&'t str>> {
        let (_, line) = *self.lines.get(self.pos).ok_or_else(|| GrffError::Parse {
            line: 0,
            msg: format!("unexpected end of file, expected `{key}`"),
        })?;
        self.pos += 1;
        let mut tok = line.split(' ');
        if tok.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        Ok(tok.collect())
    }

    fn usize(&self, s: &str) -> Result<usize> {
        s.parse().map_err(|_| self.err(format!("bad integer {s:?}")))
    }

    fn f64(&self, s: &str) -> Result<f64> {
        if s.len() != 16 {
            return Err(self.err(format!("bad float {s:?}")));
        }
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|_| self.err(format!("bad float {s:?}")))
    }

    fn named(&self, tok: &[&str], name: &str) -> Result<()> {
        if tok.first() != Some(&name) {
            return Err(self.err(format!("expected entry `{name}`, found {:?}", tok.first())));
        }
        Ok(())
    }

    fn floats(&mut self, name: &str) -> Result<Vec<f64>> {
        let tok = self.next("stats")?;
        self.named(&tok, name)?;
        let n = self.usize(tok.get(1).ok_or_else(|| self.err("missing length"))?)?;
        if tok.len() != n + 2 {
            return Err(self.err(format!("{name}: expected {n} values, found {}", tok.len().saturating_sub(2))));
        }
        tok[2..].iter().map(|s| self.f64(s)).collect()
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let tok = self.next("tensor")?;
        self.named(&tok, name)?;
        let nd = self.usize(tok.get(1).ok_or_else(|| self.err("missing rank"))?)?;
        if tok.len() < 2 + nd {
            return Err(self.err(format!("{name}: truncated shape")));
        }
        let dims: Vec<usize> = tok[2..2 + nd].iter().map(|s| self.usize(s)).collect::<Result<_>>()?;
        if dims != shape {
            return Err(GrffError::Consistency(format!("{name}: stored shape {dims:?}, expected {shape:?}")));
        }
        let values: Vec<f64> = tok[2 + nd..].iter().map(|s| self.f64(s)).collect::<Result<_>>()?;
        Tensor::new(dims, values).map_err(|e| self.err(format!("{name}: {e}")))
    }

    fn ints(&self, tok: &[&str]) -> Result<Vec<usize>> {
        tok.iter().map(|s| self.usize(s)).collect()
    }

    fn generator(&mut self, k: usize) -> Result<GeneratorParams> {
        let tok = self.next("generator")?;
        if tok.len() != 2 || self.usize(tok[0])? != k {
            return Err(self.err(format!("expected `generator {k} frozen|trainable`")));
        }
        let frozen = match tok[1] {
            "frozen" => true,
            "trainable" => false,
            other => return Err(self.err(format!("unknown generator state {other:?}"))),
        };
        let widths = {
            let tok = self.next("widths")?;
            self.ints(&tok)?
        };
        if widths.len() < 2 {
            return Err(self.err("generator needs at least two widths"));
        }
        let act = self.next("activation")?;
        let activation = match act.as_slice() {
            ["relu"] => Activation::Relu,
            ["leaky_relu", s] => Activation::LeakyRelu(self.f64(s)?),
            _ => return Err(self.err("unknown activation")),
        };
        let ker = self.next("kernel")?;
        let kernel = match ker.as_slice() {
            ["none"] => None,
            [c, h, w] => Some((self.usize(c)?, self.usize(h)?, self.usize(w)?)),
            _ => return Err(self.err("expected `kernel none` or `kernel C H W`")),
        };
        let mut linears = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let weight = self.tensor(&format!("linear{i}.weight"), &[w[0], w[1]])?;
            let bias = self.tensor(&format!("linear{i}.bias"), &[w[1]])?;
            linears.push(Linear {
                weight: Parameter::new(weight),
                bias: Parameter::new(bias),
            });
        }
        let mut norms = Vec::new();
        for (i, &h) in widths[1..widths.len() - 1].iter().enumerate() {
            let gamma = self.tensor(&format!("norm{i}.gamma"), &[h])?;
            let beta = self.tensor(&format!("norm{i}.beta"), &[h])?;
            let mean = self.floats(&format!("norm{i}.running_mean"))?;
            let var = self.floats(&format!("norm{i}.running_var"))?;
            if mean.len() != h || var.len() != h {
                return Err(GrffError::Consistency(format!("norm{i}: running statistics do not have {h} entries")));
            }
            norms.push(Norm {
                gamma: Parameter::new(gamma),
                beta: Parameter::new(beta),
                running: RunningStats { mean, var },
            });
        }
        Ok(GeneratorParams {
            arch: GeneratorArchitecture {
                widths,
                activation,
                kernel,
            },
            linears,
            norms,
            frozen,
        })
    }

    fn network(mut self) -> Result<GrffNetwork> {
        let v = self.next("variant")?;
        let variant = match v.as_slice() {
            ["vector", d] => Variant::Vector { dim: self.usize(d)? },
            ["image", c, h, w] => Variant::Image {
                channels: self.usize(c)?,
                height: self.usize(h)?,
                width: self.usize(w)?,
            },
            _ => return Err(self.err("unknown variant")),
        };
        let c = self.next("classes")?;
        let num_classes = self.usize(c.first().ok_or_else(|| self.err("missing class count"))?)?;
        let d = self.next("d_list")?;
        let d_list = self.ints(&d)?;
        let nz = self.next("noise")?;
        if nz.len() != 2 {
            return Err(self.err("expected `noise <dim> <seed>`"));
        }
        let noise = NoiseSpec {
            noise_dim: self.usize(nz[0])?,
            seed: nz[1].parse().map_err(|_| self.err("bad noise seed"))?,
        };
        let s = self.next("input_scale")?;
        let input_scale = self.f64(s.first().ok_or_else(|| self.err("missing input scale"))?)?;
        let mut generators = Vec::new();
        for k in 1..=d_list.len() {
            let g = self.generator(k)?;
            if g.arch.widths[0] != noise.noise_dim {
                return Err(GrffError::Consistency(format!("generator {k} does not read {}-dim noise", noise.noise_dim)));
            }
            generators.push(g);
        }
        let head = {
            let (_, line) = *self.lines.get(self.pos).ok_or_else(|| self.err("missing classifier"))?;
            let tok: Vec<&str> = line.split(' ').collect();
            if tok.len() < 5 || tok[1] != "classifier.weight" {
                return Err(self.err("expected classifier.weight"));
            }
            self.usize(tok[3])?
        };
        let weight = self.tensor("classifier.weight", &[head, num_classes])?;
        let bias = self.tensor("classifier.bias", &[num_classes])?;
        let fz = self.next("frozen_noise")?;
        let frozen_noise = match fz.as_slice() {
            ["none"] => None,
            [n] => {
                let n = self.usize(n)?;
                if n != d_list.len() {
                    return Err(GrffError::Consistency(format!("{n} frozen noise batches for {} layers", d_list.len())));
                }
                let mut out = Vec::new();
                for (k, &dk) in d_list.iter().enumerate() {
                    out.push(self.tensor(&format!("noise{}", k + 1), &[dk, noise.noise_dim])?);
                }
                Some(out)
            }
            _ => return Err(self.err("expected `frozen_noise none` or a count")),
        };
        let nm = self.next("normalization")?;
        let normalization = match nm.as_slice() {
            ["none"] => None,
            ["minmax"] => Some(MinMax {
                min: self.floats("min")?,
                max: self.floats("max")?,
            }),
            _ => return Err(self.err("unknown normalization")),
        };
        if self.pos != self.lines.len() {
            self.pos += 1;
            return Err(self.err("trailing content"));
        }
        Ok(GrffNetwork {
            variant,
            d_list,
            num_classes,
            noise,
            generators,
            classifier: Linear {
                weight: Parameter::new(weight),
                bias: Parameter::new(bias),
            },
            frozen_noise,
            normalization,
            input_scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params_bits(net: &GrffNetwork) -> Vec<u64> {
        let mut v: Vec<u64> = net.generators.iter().flat_map(|g| g.snapshot()).map(f64::to_bits).collect();
        v.extend(net.classifier.weight.value().data().iter().map(|x| x.to_bits()));
        v.extend(net.classifier.bias.value().data().iter().map(|x| x.to_bits()));
        v
    }

    fn trained_like(seed: u64) -> GrffNetwork {
        let mut spec = NetworkSpec::vector(4, &[8, 6], 3);
        spec.noise_dim = 5;
        spec.hidden = Some(vec![vec![7], vec![9, 4]]);
        let mut net = GrffNetwork::build(&spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in &mut net.generators {
            for n in &mut g.norms {
                for v in n.running.mean.iter_mut().chain(n.running.var.iter_mut()) {
                    *v = rng.random::<f64>() + 0.1;
                }
            }
        }
        net.generators[0].frozen = true;
        net.freeze_noise(9);
        net.normalization = Some(MinMax {
            min: vec![-1.0, 0.0, 1.0 / 3.0, f64::MIN_POSITIVE],
            max: vec![1.0, 2.0, 1e300, 5.0],
        });
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = trained_like(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.grff");
        save_model(&net, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(params_bits(&net), params_bits(&back));
        assert_eq!(back.frozen_noise, net.frozen_noise);
        assert_eq!(back.normalization, net.normalization);
        assert_eq!(back.noise, net.noise);
        assert!(back.generators[0].frozen && !back.generators[1].frozen);
        assert_eq!(back.generators[1].norms[1].running, net.generators[1].norms[1].running);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![100, 4], (0..400).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = net.forward(&x, net.frozen_noise.as_ref().unwrap(), crate::generator::Mode::Eval).unwrap();
        let b = back.forward(&x, back.frozen_noise.as_ref().unwrap(), crate::generator::Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.predict(&x, 0).unwrap(), back.predict(&x, 77).unwrap());
        assert_eq!(model_to_string(&back), model_to_string(&net));
    }

    #[test]
    fn image_model_round_trip() {
        let mut spec = NetworkSpec::image(1, 12, 12, &[3], 2);
        spec.noise_dim = 4;
        spec.hidden = Some(vec![vec![6]]);
        let net = GrffNetwork::build(&spec, 2).unwrap();
        let back = model_from_str(&model_to_string(&net)).unwrap();
        assert_eq!(back.variant, net.variant);
        assert_eq!(back.generators[0].arch, net.generators[0].arch);
        assert_eq!(params_bits(&back), params_bits(&net));
        assert_eq!(back.input_scale, net.input_scale);
    }

    #[test]
    fn truncation_and_corruption_are_checksum_errors() {
        let text = model_to_string(&trained_like(4));
        for cut in [text.len() - 1, text.len() - 30, text.len() / 2, 40] {
            assert!(matches!(model_from_str(&text[..cut]), Err(GrffError::Checksum(_))), "cut {cut}");
        }
        let i = text.find("tensor linear0.bias").unwrap() + 30;
        let mut bytes = text.clone().into_bytes();
        bytes[i] = if bytes[i] == b'0' { b'1' } else { b'0' };
        let flipped = String::from_utf8(bytes).unwrap();
        assert!(matches!(model_from_str(&flipped), Err(GrffError::Checksum(_))));
    }

    #[test]
    fn other_versions_need_migration() {
        let text = model_to_string(&trained_like(5)).replacen("version 1", "version 2", 1);
        assert!(matches!(model_from_str(&text), Err(GrffError::Migration { .. })));
        assert!(matches!(model_from_str("hello\n"), Err(GrffError::Format(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_model(Path::new("/nonexistent/m.grff")), Err(GrffError::MissingFile { .. })));
    }
}
