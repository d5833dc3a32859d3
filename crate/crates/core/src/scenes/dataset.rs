use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::LayoutDoc;
use crate::error::{Error, Result};
use crate::numcore::io::{read_tensor, write_tensor};
use crate::numcore::Tensor;

use super::{gen_scene, SceneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub seed: u64,
    pub layout: String,
    pub image: String,
    pub tensor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SceneConfig,
    pub items: Vec<DatasetItem>,
}

/// Binary PPM of a `[3, H, W]` image in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::Format(format!("PPM needs an RGB image, got {:?}", image.shape())));
    };
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut fields = Vec::new();
    while fields.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PPM header".into()));
        }
        let line = line.split('#').next().unwrap_or_default();
        fields.extend(line.split_whitespace().map(str::to_owned));
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format("only 8-bit P6 images are supported".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM extent `{s}`")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let mut bytes = vec![0u8; 3 * w * h];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * w * h + i] = f64::from(bytes[3 * i + c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Render scenes for `seeds` into `dir` with a manifest.
pub fn write_dataset(dir: &Path, seeds: impl IntoIterator<Item = u64>, cfg: &SceneConfig) -> Result<Manifest> {
    for sub in ["layouts", "images", "tensors"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut items = Vec::new();
    for seed in seeds {
        let scene = gen_scene(seed, cfg);
        let item = DatasetItem {
            seed,
            layout: format!("layouts/{seed:08}.json"),
            image: format!("images/{seed:08}.ppm"),
            tensor: format!("tensors/{seed:08}.tnsr"),
        };
        scene.spec.to_doc().save(&dir.join(&item.layout))?;
        write_ppm(&dir.join(&item.image), &scene.image)?;
        let mut w = BufWriter::new(File::create(dir.join(&item.tensor))?);
        write_tensor(&mut w, &scene.image)?;
        w.flush()?;
        items.push(item);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        items,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Layout documents and images (from the tensor mirrors) of a dataset.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<(LayoutDoc, Tensor)>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut out = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let doc = LayoutDoc::load(&dir.join(&item.layout))?;
        let image = read_tensor(&mut BufReader::new(File::open(dir.join(&item.tensor))?))?;
        out.push((doc, image));
    }
    Ok((manifest, out))
}
