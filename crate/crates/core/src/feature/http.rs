use std::thread::sleep;
use std::time::Duration;

use image::RgbImage;
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::wire::{decode_mask_b64, encode_png_b64};
use super::{BinaryMask, FeatureError, FeatureProvider, FeatureVector, ProviderInfo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpProviderConfig {
    pub timeout_secs: f64,
    /// Attempts after the first one for transport errors and 503.
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        Self {
            timeout_secs: 60.0,
            retries: 4,
            backoff_ms: 250,
            max_in_flight: 4,
        }
    }
}

/// Client for a model service speaking the provider wire protocol.
#[derive(Debug)]
pub struct HttpProvider {
    base: String,
    client: Client,
    cfg: HttpProviderConfig,
    info: ProviderInfo,
}

#[derive(Deserialize)]
struct InfoBody {
    dim: usize,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    image_model: String,
    #[serde(default)]
    text_model: String,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct MaskBody {
    mask: String,
}

fn unavailable(e: impl std::fmt::Display) -> FeatureError {
    FeatureError::ProviderUnavailable(e.to_string())
}

impl HttpProvider {
    /// Connects and fetches `/info`.
    pub fn connect(base_url: &str, cfg: HttpProviderConfig) -> Result<Self, FeatureError> {
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(unavailable)?;
        let mut p = Self {
            base: base_url.trim_end_matches('/').to_owned(),
            client,
            cfg,
            info: ProviderInfo {
                name: String::new(),
                dim: 0,
                image_model: String::new(),
                text_model: String::new(),
            },
        };
        let body: InfoBody = p.call(|c, url| c.get(url), "info")?;
        if body.dim == 0 {
            return Err(FeatureError::ProviderProtocol("provider reports dim 0".into()));
        }
        p.info = ProviderInfo {
            name: body.name.unwrap_or_else(|| format!("{}|{}", body.image_model, body.text_model)),
            dim: body.dim,
            image_model: body.image_model,
            text_model: body.text_model,
        };
        Ok(p)
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn call<T, F>(&self, request: F, endpoint: &str) -> Result<T, FeatureError>
    where
        T: for<'de> Deserialize<'de>,
        F: Fn(&Client, &str) -> reqwest::blocking::RequestBuilder,
    {
        let url = format!("{}/{endpoint}", self.base);
        let mut attempt = 0;
        loop {
            let wait = match request(&self.client, &url).send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<T>()
                        .map_err(|e| FeatureError::ProviderProtocol(format!("{endpoint}: {e}")));
                }
                Ok(resp) if resp.status() == StatusCode::SERVICE_UNAVAILABLE => {
                    if attempt >= self.cfg.retries {
                        return Err(unavailable(format!("{endpoint}: model service still loading")));
                    }
                    retry_after(&resp)
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    return Err(if status.is_server_error() {
                        unavailable(format!("{endpoint}: {status} {text}"))
                    } else {
                        FeatureError::ProviderProtocol(format!("{endpoint}: {status} {text}"))
                    });
                }
                Err(e) => {
                    if attempt >= self.cfg.retries {
                        return Err(unavailable(format!("{endpoint}: {e}")));
                    }
                    None
                }
            };
            let backoff = Duration::from_millis(self.cfg.backoff_ms.saturating_mul(1 << attempt.min(10)));
            sleep(wait.map_or(backoff, |w| w.min(Duration::from_secs(30))));
            attempt += 1;
        }
    }

    fn embedding(&self, body: EmbeddingBody) -> Result<FeatureVector, FeatureError> {
        if body.embedding.len() != self.info.dim {
            return Err(FeatureError::DimMismatch {
                expected: self.info.dim,
                found: body.embedding.len(),
            });
        }
        FeatureVector::new(body.embedding)
    }
}

fn retry_after(resp: &Response) -> Option<Duration> {
    let secs: f64 = resp
        .headers()
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse()
        .ok()?;
    (secs.is_finite() && secs >= 0.0).then(|| Duration::from_secs_f64(secs))
}

impl FeatureProvider for HttpProvider {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn embed_image(&self, image: &RgbImage) -> Result<FeatureVector, FeatureError> {
        let body = json!({ "image": encode_png_b64(image) });
        let r: EmbeddingBody = self.call(|c, url| c.post(url).json(&body), "embed_image")?;
        self.embedding(r)
    }

    fn embed_text(&self, text: &str) -> Result<FeatureVector, FeatureError> {
        let body = json!({ "text": text });
        let r: EmbeddingBody = self.call(|c, url| c.post(url).json(&body), "embed_text")?;
        self.embedding(r)
    }

    fn segment(&self, image: &RgbImage, prompts: &[[f64; 2]]) -> Result<BinaryMask, FeatureError> {
        let body = json!({ "image": encode_png_b64(image), "points": prompts });
        let r: MaskBody = self.call(|c, url| c.post(url).json(&body), "segment")?;
        let mask = decode_mask_b64(&r.mask)?;
        if (mask.width, mask.height) != image.dimensions() {
            return Err(FeatureError::ProviderProtocol(format!(
                "segment returned a {}x{} mask for a {}x{} image",
                mask.width,
                mask.height,
                image.width(),
                image.height()
            )));
        }
        Ok(mask)
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.max_in_flight.max(1)
    }
}
