//! Position-bucketed loss and needle-retrieval grids.

use std::fmt::Write as _;

use super::tasks::NeedleTask;
use crate::cost::CSV_HEADER;
use crate::decode::generate;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllBucket {
    pub start: usize,
    pub mean_nll: f64,
    /// The bucket reaches past the length the model was trained on.
    pub extrapolated: bool,
}

/// Mean next-token loss over consecutive buckets of `bucket` positions.
/// The stream is scored as one sequence; its last bucket may be short.
pub fn positionwise_nll(model: &Model, stream: &[usize], bucket: usize, train_len: Option<usize>) -> Result<Vec<NllBucket>> {
    if bucket == 0 || stream.len() < bucket + 1 {
        return Err(Error::config(format!("stream of {} tokens is shorter than one bucket of {bucket}", stream.len())));
    }
    let n = stream.len() - 1;
    let logits = model.logits(&stream[..n], 1, n)?;
    let nll: Vec<f64> = (0..n)
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[stream[i + 1]]
        })
        .collect();
    Ok(nll
        .chunks(bucket)
        .enumerate()
        .map(|(b, c)| {
            let start = b * bucket;
            NllBucket {
                start,
                mean_nll: c.iter().sum::<f64>() / c.len() as f64,
                extrapolated: train_len.is_some_and(|t| start + c.len() > t),
            }
        })
        .collect())
}

/// Exact-match retrieval accuracy, `accuracy[length][depth]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NiahGrid {
    pub depths: Vec<f64>,
    pub lengths: Vec<usize>,
    pub accuracy: Vec<Vec<f64>>,
}

/// Greedily generates the value for `trials` needles per cell and scores
/// exact matches. Cells run on separate threads; each has its own seed.
pub fn niah_eval(model: &Model, depths: &[f64], lengths: &[usize], trials: usize, seed: u64) -> Result<NiahGrid> {
    if depths.is_empty() || lengths.is_empty() || trials == 0 {
        return Err(Error::config("NIAH grid needs depths, lengths and at least one trial"));
    }
    let cells: Vec<(usize, f64)> = lengths.iter().flat_map(|&l| depths.iter().map(move |&d| (l, d))).collect();
    let results: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .iter()
            .enumerate()
            .map(|(i, &(len, depth))| {
                s.spawn(move || {
                    let cell_seed = Rng::derive(seed, i as u64).below(0, usize::MAX) as u64;
                    let task = NeedleTask::new(model.cfg.vocab, len, depth, cell_seed);
                    cell_accuracy(model, &task, trials)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("NIAH worker panicked")).collect()
    });
    let flat = results.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(NiahGrid {
        depths: depths.to_vec(),
        lengths: lengths.to_vec(),
        accuracy: flat.chunks(depths.len()).map(<[f64]>::to_vec).collect(),
    })
}

pub fn cell_accuracy(model: &Model, task: &NeedleTask, trials: usize) -> Result<f64> {
    let b = task.gen_batch(trials)?;
    let p = task.prompt_len();
    let mut hits = 0;
    for r in 0..trials {
        let (ids, _) = b.batch.row(r);
        hits += usize::from(generate(model, &ids[..p], task.value_len)? == b.values[r]);
    }
    Ok(hits as f64 / trials as f64)
}

impl NiahGrid {
    /// Versioned CSV: optional `# key=value` lines, then a header of depths
    /// and one row per length.
    pub fn to_csv(&self, meta: &[(String, String)]) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (k, v) in meta {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("length");
        for d in &self.depths {
            let _ = write!(s, ",{d}");
        }
        s.push('\n');
        for (l, row) in self.lengths.iter().zip(&self.accuracy) {
            let _ = write!(s, "{l}");
            for a in row {
                let _ = write!(s, ",{a}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<(NiahGrid, Vec<(String, String)>)> {
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == CSV_HEADER => {}
            _ => return Err(perr(1, format!("expected `{CSV_HEADER}`"))),
        }
        let mut meta = Vec::new();
        let mut depths = None;
        let (mut lengths, mut accuracy) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            let n = i + 1;
            if let Some(m) = line.strip_prefix('#') {
                let (k, v) = m.trim().split_once('=').ok_or_else(|| perr(n, "metadata needs key=value".into()))?;
                meta.push((k.to_string(), v.to_string()));
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            let first = cells.next().unwrap_or_default();
            let nums = cells
                .map(|c| c.trim().parse::<f64>().map_err(|_| perr(n, format!("bad number `{c}`"))))
                .collect::<Result<Vec<f64>>>()?;
            match &depths {
                None if first == "length" => depths = Some(nums),
                None => return Err(perr(n, "expected the `length,...` header".into())),
                Some(d) => {
                    if nums.len() != d.len() {
                        return Err(perr(n, format!("{} cells for {} depths", nums.len(), d.len())));
                    }
                    lengths.push(first.trim().parse().map_err(|_| perr(n, format!("bad length `{first}`")))?);
                    accuracy.push(nums);
                }
            }
        }
        let depths = depths.ok_or_else(|| perr(1, "missing header".into()))?;
        Ok((NiahGrid { depths, lengths, accuracy }, meta))
    }

    /// Mean accuracy over the cells whose length is at most `max_len`.
    pub fn mean_within(&self, max_len: usize) -> Option<f64> {
        let v: Vec<f64> =
            self.lengths.iter().zip(&self.accuracy).filter(|(l, _)| **l <= max_len).flat_map(|(_, r)| r.clone()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::harness::tasks::RandomTokens;
    use crate::harness::DataSource;

    fn toy(name: &str) -> Model {
        let p = preset(name).unwrap();
        Model::new(&p.config, &p.layout, 2).unwrap()
    }

    #[test]
    fn untrained_loss_is_near_max_entropy() {
        // tiny init makes the logits nearly flat
        let p = preset("toy-inter").unwrap();
        let cfg = crate::config::ModelConfig { init_std: 0.01, ..p.config };
        let m = Model::new(&cfg, &p.layout, 2).unwrap();
        let b = RandomTokens { vocab: 32, len: 256 }.next_batch(&mut Rng::new(5), 1).unwrap();
        let mut stream = b.ids.clone();
        stream.push(b.targets[255].unwrap());
        let buckets = positionwise_nll(&m, &stream, 64, Some(128)).unwrap();
        assert_eq!(buckets.len(), 4);
        for bk in &buckets {
            assert!((bk.mean_nll / 32f64.ln() - 1.0).abs() < 0.02, "{bk:?}");
        }
        assert_eq!(buckets.iter().map(|b| b.extrapolated).collect::<Vec<_>>(), [false, false, true, true]);
    }

    #[test]
    fn one_bucket_is_the_stream_mean() {
        let m = toy("toy-mamba");
        let stream: Vec<usize> = (0..40).map(|i| (i * 5) % 32).collect();
        let one = positionwise_nll(&m, &stream, 39, None).unwrap();
        let per = positionwise_nll(&m, &stream, 1, None).unwrap();
        let mean = per.iter().map(|b| b.mean_nll).sum::<f64>() / 39.0;
        assert_eq!(one.len(), 1);
        assert!((one[0].mean_nll - mean).abs() < 1e-12);
        assert!(positionwise_nll(&m, &stream[..5], 8, None).is_err());
    }

    #[test]
    fn greedy_scoring_equals_teacher_forced_argmax() {
        // with the answer teacher-forced, greedy decoding reproduces it iff
        // every scored position's argmax is right
        let m = toy("toy-intra");
        let task = NeedleTask::new(32, 24, 0.5, 4);
        let b = task.gen_batch(20).unwrap();
        let logits = m.logits(&b.batch.ids, 20, 24).unwrap();
        let mut want = 0;
        for r in 0..20 {
            let (_, t) = b.batch.row(r);
            let ok = t.iter().enumerate().all(|(i, t)| {
                t.is_none_or(|t| crate::decode::argmax(logits.row(r * 24 + i)) == t)
            });
            want += usize::from(ok);
        }
        assert_eq!(cell_accuracy(&m, &task, 20).unwrap(), want as f64 / 20.0);
    }

    #[test]
    fn grid_shape_and_round_trip() {
        let m = toy("toy-swa");
        let g = niah_eval(&m, &[0.0, 0.5, 1.0], &[16, 24], 4, 1).unwrap();
        assert_eq!(g.accuracy.len(), 2);
        assert!(g.accuracy.iter().all(|r| r.len() == 3));
        // value tokens are 1 of 9 each, two per needle
        assert!(g.mean_within(24).unwrap() < 0.5);
        let meta = vec![("seed".to_string(), "1".to_string()), ("preset".to_string(), "toy-swa".to_string())];
        let csv = g.to_csv(&meta);
        assert!(csv.lines().nth(3).unwrap().starts_with("length,0,0.5,1"));
        let (back, m2) = NiahGrid::from_csv(&csv).unwrap();
        assert_eq!(back, g);
        assert_eq!(m2, meta);
        assert_eq!(niah_eval(&m, &[0.0, 0.5, 1.0], &[16, 24], 4, 1).unwrap(), g);
        assert!(NiahGrid::from_csv("length,1\n").is_err());
        assert!(NiahGrid::from_csv(&csv.replace(",0.5,", ",x,")).is_err());
    }
}
