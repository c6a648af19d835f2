use ndarray::Array1;
use rand::Rng;
use zsdet::config::RunConfig;
use zsdet::dataset::{load_coco_json, DatasetSplit, Role};
use zsdet::detector::boxcodec::decode_deltas;
use zsdet::detector::checkpoint::load_checkpoint;
use zsdet::detector::roi::roi_align;
use zsdet::detector::train::DetectorModel;
use zsdet::encoder::{Encoder, MockEncoder};
use zsdet::geometry::{iou, Box2D};
use zsdet::rngutil::stage_rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = std::path::Path::new(&args[1]);
    let ckpt = std::path::Path::new(&args[2]);
    let cfg = RunConfig::toy_preset(1);
    let split = DatasetSplit::load_json(&data.join("split.json")).unwrap();
    let ds = load_coco_json(&data.join("annotations.json"), &split).unwrap();
    let (mut model, _) = load_checkpoint(ckpt).unwrap();
    let enc = MockEncoder::new(cfg.encoder_seed, cfg.embed_dim);
    model.classifier.novel = enc.encode_text(&split.novel, &cfg.prompt_template).unwrap();
    let stride = model.cfg.feature_stride() as f64;
    let zero = Array1::<f64>::zeros(model.cfg.embed_dim);
    let mut rng = stage_rng(7, "probe", 0);

    // per category: mean IoU before refinement, after refinement with own
    // embedding, with zero embedding, with first-base embedding
    let mut agg: std::collections::BTreeMap<String, (usize, f64, f64, f64, f64)> = Default::default();
    for im in ds.images.iter().take(80) {
        let px = im.load_pixels().unwrap();
        let x = DetectorModel::image_tensor(&px);
        let (fmap, _) = model.backbone.forward(&x);
        for a in ds.annotations_for(im.image_id) {
            for _ in 0..4 {
                let (cx, cy) = a.bbox.center();
                let (w, h) = (a.bbox.width(), a.bbox.height());
                let ncx = cx + rng.gen_range(-0.3..0.3) * w;
                let ncy = cy + rng.gen_range(-0.3..0.3) * h;
                let nw = w * rng.gen_range(0.7..1.5);
                let nh = h * rng.gen_range(0.7..1.5);
                let j = Box2D {
                    x1: (ncx - nw / 2.0).clamp(0.0, px.width as f64),
                    y1: (ncy - nh / 2.0).clamp(0.0, px.height as f64),
                    x2: (ncx + nw / 2.0).clamp(0.0, px.width as f64),
                    y2: (ncy + nh / 2.0).clamp(0.0, px.height as f64),
                };
                if !j.is_valid() { continue; }
                let (pooled, _) = roi_align(&fmap, &[j], 1.0 / stride, model.cfg.roi_pool_size);
                let (rf, _) = model.conv_r.forward(&pooled);
                let own = match split.role(&a.category) {
                    Some(Role::Base) => {
                        let i = model.classifier.base.iter().position(|e| e.category_name == a.category).unwrap();
                        model.classifier.base[i].values.clone()
                    }
                    _ => {
                        let i = model.classifier.novel.iter().position(|e| e.category_name == a.category).unwrap();
                        model.classifier.novel[i].values.clone()
                    }
                };
                let b0 = &model.classifier.base[0].values;
                let mut ious = [0.0f64; 3];
                for (k, emb) in [&own, &zero, b0].iter().enumerate() {
                    let (d, _) = model.regressor.forward(&rf, &[emb]).unwrap();
                    let dd = [d[[0,0]], d[[0,1]], d[[0,2]].clamp(-4.0,4.0), d[[0,3]].clamp(-4.0,4.0)];
                    ious[k] = iou(&decode_deltas(&j, &dd), &a.bbox);
                }
                let e = agg.entry(a.category.clone()).or_insert((0, 0.0, 0.0, 0.0, 0.0));
                e.0 += 1;
                e.1 += iou(&j, &a.bbox);
                e.2 += ious[0];
                e.3 += ious[1];
                e.4 += ious[2];
            }
        }
    }
    for (c, (n, pre, own, z, b0)) in agg {
        let n_ = n as f64;
        println!("{c:15} n {n:3} pre {:.3} own-emb {:.3} zero-emb {:.3} base0-emb {:.3}", pre/n_, own/n_, z/n_, b0/n_);
    }
}
