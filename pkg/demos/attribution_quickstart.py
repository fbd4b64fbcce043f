"""Train tiny models, attribute one composite query, print the credits.

A scaled-down version of what `credtrace demo-mnist-scale` does, kept
small enough to finish in about twenty seconds: 100 corpus images at
64px, two encoder epochs, four verifier epochs. The match threshold is
lowered to 0.4 because a verifier this small separates pairs around that
level; the full-scale configuration uses 0.7.
"""

import time

from credtrace.apportion import AttributionConfig, attribute_image
from credtrace.config import Config
from credtrace.corpus import compose_query_set, make_corpus
from credtrace.encoder import train_encoder
from credtrace.pipeline import build_corpus_index, build_descriptor_cache
from credtrace.verifier import train_verifier


def main() -> None:
    config = Config(corpus_size=100, image_size=64, input_size=64,
                    encoder_epochs=2, verifier_epochs=4, auc_floor=0.5,
                    lambda_threshold=0.4)
    t0 = time.time()
    images = make_corpus(config.corpus_size, seed=config.corpus_seed,
                         size=config.image_size)
    print(f"corpus: {len(images)} images at {config.image_size}px")

    encoder, enc_report = train_encoder(images, config.encoder_config())
    print(f"encoder: margin={enc_report.val_margin:.3f} "
          f"({time.time() - t0:.0f}s)")
    verifier, ver_report = train_verifier(images, encoder,
                                          config.verifier_config())
    print(f"verifier: auc={ver_report.val_auc:.3f} ({time.time() - t0:.0f}s)")

    index = build_corpus_index(images, encoder, config.index_params(),
                               seed=config.index_seed)
    cache = build_descriptor_cache(images, verifier)
    print(f"index: {len(index)} patch fingerprints")

    query = compose_query_set(images, n_queries=1, seed=config.query_seed)[0]
    print(f"\nquery {query.query_id} composed from: {sorted(query.sources)}")

    attribution = AttributionConfig(top_k=config.top_k,
                                    lambda_threshold=config.lambda_threshold,
                                    top_m=config.top_m, nprobe=config.nprobe)
    report = attribute_image(query.pixels, query.query_id, index, encoder,
                             verifier, lambda i, s: cache[(i, s)], attribution)

    print(f"matched patches: {report.matched_patches}")
    print("royalty weights (* = true source):")
    ranked = sorted(report.royalty_weights.items(), key=lambda kv: -kv[1])
    for image_id, weight in ranked:
        marker = "*" if image_id in query.sources else " "
        print(f"  {marker} {image_id}  {weight:.3f}")
    hits = sum(1 for i, _ in ranked if i in query.sources)
    print(f"{hits} of {len(query.sources)} true sources credited "
          f"({time.time() - t0:.0f}s total)")


if __name__ == "__main__":
    main()
