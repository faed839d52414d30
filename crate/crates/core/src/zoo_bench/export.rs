use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ZooError;
use crate::generation::PromptEmbedding;
use crate::training::derive_seed;

/// An embedded model with its plotting labels.
#[derive(Debug, Clone)]
pub struct LabeledEmbedding {
    pub embedding: PromptEmbedding,
    pub family: String,
    pub modality: String,
}

/// CSV with columns `latent_0..latent_{d-1}, model_id, family, modality`:
/// up to `per_model` unmasked token latents per model, sampled without
/// replacement and written in sequence order. Returns the row count.
pub fn export_latents(
    models: &[LabeledEmbedding],
    per_model: usize,
    seed: u64,
    out: impl Write,
) -> Result<usize, ZooError> {
    if models.is_empty() {
        return Err(ZooError::EmptyInput);
    }
    let dim = models[0].embedding.chunks.first().map_or(0, |c| c.latents.ncols());
    let mut writer = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..dim).map(|j| format!("latent_{j}")).collect();
    header.extend(["model_id", "family", "modality"].map(String::from));
    writer.write_record(&header)?;
    let mut rows = 0;
    for (m, model) in models.iter().enumerate() {
        let latents: Vec<Vec<f64>> = model
            .embedding
            .chunks
            .iter()
            .flat_map(|c| {
                c.latents
                    .rows()
                    .into_iter()
                    .zip(c.row_valid())
                    .filter(|(_, ok)| *ok)
                    .map(|(r, _)| r.to_vec())
                    .collect::<Vec<_>>()
            })
            .collect();
        let take = per_model.min(latents.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[m as u64]));
        let mut picked = rand::seq::index::sample(&mut rng, latents.len(), take).into_vec();
        picked.sort_unstable();
        for i in picked {
            let mut record: Vec<String> = latents[i].iter().map(|v| v.to_string()).collect();
            record.push(model.embedding.prompt_id.clone());
            record.push(model.family.clone());
            record.push(model.modality.clone());
            writer.write_record(&record)?;
            rows += 1;
        }
    }
    writer.flush().map_err(|e| ZooError::Io("latent export".into(), e))?;
    Ok(rows)
}
