//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form and parsed exactly, so a reloaded classifier predicts bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Classifier, EpochLog, ModelConfig};
use crate::{Error, Result};

pub const FORMAT: &str = "cfkd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    config: ModelConfig,
    parameters: Vec<f64>,
    training_log: Vec<EpochLog>,
}

pub fn to_string(c: &Classifier) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Envelope {
        format: FORMAT.into(),
        version: VERSION,
        config: c.config.clone(),
        parameters: c.parameters.clone(),
        training_log: c.training_log.clone(),
    })?)
}

pub fn store(c: &Classifier, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_string(c)?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Classifier> {
    let env: Envelope = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if env.format != FORMAT || env.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint {} v{}", env.format, env.version),
        ));
    }
    let mut c =
        Classifier::from_parameters(env.config, env.parameters).map_err(|e| Error::format(path, e.to_string()))?;
    c.training_log = env.training_log;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::ModelConfig;

    #[test]
    fn reload_predicts_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut c = Classifier::new(ModelConfig::mlp(3, vec![5], 8)).unwrap();
        c.parameters
            .iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p += (i as f64).sqrt() / 7.0);
        c.training_log.push(EpochLog {
            epoch: 1,
            train_loss: 0.1 + 0.2,
            val_loss: Some(1.0 / 3.0),
        });
        store(&c, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, c);
        let x = [0.1, -0.7, 2.2];
        assert_eq!(back.logit(&x).to_bits(), c.logit(&x).to_bits());
    }

    #[test]
    fn rejects_foreign_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"{"format":"other","version":1,"config":{"architecture":{"kind":"linear"},"input_dim":1,"init_seed":0},"parameters":[0,0],"training_log":[]}"#,
        )
        .unwrap();
        assert!(load(&path).is_err());
    }
}
