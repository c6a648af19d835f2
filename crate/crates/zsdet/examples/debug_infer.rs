use ndarray::Array1;
use zsdet::config::RunConfig;
use zsdet::dataset::{load_coco_json, DatasetSplit};
use zsdet::detector::checkpoint::load_checkpoint;
use zsdet::detector::losses::{cosine_logits, ClassifierMode};
use zsdet::detector::roi::roi_align;
use zsdet::detector::train::DetectorModel;
use zsdet::encoder::{softmax, Encoder, MockEncoder};
use zsdet::geometry::iou;

fn main() {
    let cfg = RunConfig::toy_preset(1);
    let split = DatasetSplit::load_json(std::path::Path::new("/tmp/toy/split.json")).unwrap();
    let ds = load_coco_json(std::path::Path::new("/tmp/toy/annotations.json"), &split).unwrap();
    let (mut model, _) = load_checkpoint(std::path::Path::new("/tmp/toy/m.ckpt")).unwrap();
    let enc = MockEncoder::new(cfg.encoder_seed, cfg.embed_dim);
    model.classifier.novel = enc.encode_text(&split.novel, &cfg.prompt_template).unwrap();

    let im = &ds.images[0];
    let px = im.load_pixels().unwrap();
    let gts = ds.annotations_for(im.image_id);
    println!("image {} gts:", im.image_id);
    for g in &gts {
        println!("  {} {:?}", g.category, g.bbox.as_array());
    }
    let stride = model.cfg.feature_stride() as f64;
    let x = DetectorModel::image_tensor(&px);
    let (fmap, _) = model.backbone.forward(&x);
    let (out, _) = model.rpn.forward(&fmap);
    let props = model
        .rpn
        .proposals(&out, stride, px.width as f64, px.height as f64);
    println!("rpn proposals: {}", props.len());
    for (b, s) in props.iter().take(10) {
        let best = gts.iter().map(|g| iou(b, &g.bbox)).fold(0.0, f64::max);
        println!("  score {s:.3} best-gt-iou {best:.3} box {:?}", b.as_array());
    }
    let boxes: Vec<_> = props.iter().map(|(b, _)| *b).collect();
    let (pooled, _) = roi_align(&fmap, &boxes, 1.0 / stride, model.cfg.roi_pool_size);
    let (feats, _) = model.conv_c.forward(&pooled);
    let bg = model.classifier.bg_vec();
    for i in 0..boxes.len().min(10) {
        let f: Array1<f64> = feats.row(i).to_owned();
        let logits = cosine_logits(
            &f,
            &model.classifier.base,
            &model.classifier.novel,
            &bg,
            model.cfg.tau,
            ClassifierMode::Inference,
        )
        .unwrap();
        let scores = softmax(&logits);
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        println!(
            "  prop {i}: argmax {} score {:.3} cosines {:?}",
            best.0,
            best.1,
            logits.iter().map(|l| l * model.cfg.tau).collect::<Vec<_>>()
        );
    }
}
