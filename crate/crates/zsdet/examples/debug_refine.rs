use zsdet::config::RunConfig;
use zsdet::dataset::{load_coco_json, DatasetSplit, Role};
use zsdet::detector::checkpoint::load_checkpoint;
use zsdet::detector::roi::roi_align;
use zsdet::detector::train::DetectorModel;
use zsdet::encoder::{cosine, crop_and_preprocess, Encoder, MockEncoder};
use zsdet::geometry::iou;

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
    let cats = split.all();
    let text = enc.encode_text(&cats, &cfg.prompt_template).unwrap();
    let stride = model.cfg.feature_stride() as f64;

    // per-category: GT-box conv_c argmax accuracy and mean cos margin over bg
    let mut agg: std::collections::BTreeMap<String, (usize, usize, f64, f64)> = Default::default();
    // RPN recall per role
    let mut rec: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
    for im in ds.images.iter() {
        let px = im.load_pixels().unwrap();
        let x = DetectorModel::image_tensor(&px);
        let (fmap, _) = model.backbone.forward(&x);
        let (out, _) = model.rpn.forward(&fmap);
        let props = model
            .rpn
            .proposals(&out, stride, px.width as f64, px.height as f64);
        for a in ds.annotations_for(im.image_id) {
            let (pooled, _) = roi_align(&fmap, &[a.bbox], 1.0 / stride, model.cfg.roi_pool_size);
            let (cf2, _) = model.conv_c.forward(&pooled);
            let cf = cf2.row(0).to_owned();
            let cos: Vec<f64> = text.iter().map(|t| cosine(&cf, &t.values).unwrap()).collect();
            let own = cats.iter().position(|c| *c == a.category).unwrap();
            let argmax = (0..cos.len()).max_by(|&i, &j| cos[i].total_cmp(&cos[j])).unwrap();
            let bgc = cosine(&cf, &model.classifier.bg_vec()).unwrap();
            let e = agg.entry(a.category.clone()).or_insert((0, 0, 0.0, 0.0));
            e.0 += 1;
            if argmax == own {
                e.1 += 1;
            }
            e.2 += cos[own];
            e.3 += bgc;
            let role = match split.role(&a.category) {
                Some(Role::Base) => "base",
                _ => "novel",
            };
            let best = props.iter().map(|(b, _)| iou(b, &a.bbox)).fold(0.0f64, f64::max);
            let r = rec.entry(role).or_insert((0, 0));
            r.0 += 1;
            if best >= 0.5 {
                r.1 += 1;
            }
        }
    }
    // background boxes: conv_c vs encoder cosine against each category
    let mut nbg = 0usize;
    let mut sum_conv = vec![0.0f64; cats.len()];
    let mut sum_enc = vec![0.0f64; cats.len()];
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for im in ds.images.iter().take(40) {
        let px = im.load_pixels().unwrap();
        let x = DetectorModel::image_tensor(&px);
        let (fmap, _) = model.backbone.forward(&x);
        let anns = ds.annotations_for(im.image_id);
        for _ in 0..8 {
            let side = rng.gen_range(20.0..50.0f64);
            let x1 = rng.gen_range(0.0..(px.width as f64 - side));
            let y1 = rng.gen_range(0.0..(px.height as f64 - side));
            let b = zsdet::geometry::Box2D::new(x1, y1, x1 + side, y1 + side).unwrap();
            if anns.iter().any(|a| iou(&b, &a.bbox) > 0.1) {
                continue;
            }
            let (pooled, _) = roi_align(&fmap, &[b], 1.0 / stride, model.cfg.roi_pool_size);
            let (cf2, _) = model.conv_c.forward(&pooled);
            let cf = cf2.row(0).to_owned();
            let crop = crop_and_preprocess(&px, &b, enc.input_side()).unwrap();
            let ef = enc.encode_crop(&crop);
            for (k, t) in text.iter().enumerate() {
                sum_conv[k] += cosine(&cf, &t.values).unwrap();
                sum_enc[k] += cosine(&ef, &t.values).unwrap();
            }
            nbg += 1;
        }
    }
    println!("bg boxes n {nbg}");
    for (k, c) in cats.iter().enumerate() {
        println!(
            "{c:>16}: bg mean enc-cos {:.3} conv-cos {:.3}",
            sum_enc[k] / nbg as f64,
            sum_conv[k] / nbg as f64
        );
    }

    {
        let mut rows: std::collections::BTreeMap<String, (usize, Vec<f64>)> = Default::default();
        for im in ds.images.iter().take(60) {
            let px = im.load_pixels().unwrap();
            let x = DetectorModel::image_tensor(&px);
            let (fmap, _) = model.backbone.forward(&x);
            for a in ds.annotations_for(im.image_id) {
                let (pooled, _) = roi_align(&fmap, &[a.bbox], 1.0 / stride, model.cfg.roi_pool_size);
                let (cf2, _) = model.conv_c.forward(&pooled);
                let cf = cf2.row(0).to_owned();
                let e = rows.entry(a.category.clone()).or_insert((0, vec![0.0; cats.len()]));
                e.0 += 1;
                for (k, t) in text.iter().enumerate() {
                    e.1[k] += cosine(&cf, &t.values).unwrap();
                }
            }
        }
        println!("cos rows vs {:?}", cats);
        for (c, (n, row)) in rows {
            let vals: Vec<String> = row.iter().map(|v| format!("{:.3}", v / n as f64)).collect();
            println!("  {c:15} {}", vals.join(" "));
        }
        println!("text pairwise:");
        for (i, a) in text.iter().enumerate() {
            let vals: Vec<String> = text.iter().map(|b| format!("{:.3}", cosine(&a.values, &b.values).unwrap())).collect();
            println!("  {:15} {}", cats[i], vals.join(" "));
        }
    }
    for (cat, (n, correct, sum_own, sum_bg)) in &agg {
        println!(
            "{cat:>16}: n {n:3} argmax-acc {:.2} mean cos-own {:.3} mean cos-bg {:.3}",
            *correct as f64 / *n as f64,
            sum_own / *n as f64,
            sum_bg / *n as f64
        );
    }
    for (role, (n, cov)) in &rec {
        println!("{role}: rpn recall@0.5 {:.2} ({cov}/{n})", *cov as f64 / *n as f64);
    }
}
