#include "textrec/mitp.hpp"

#include <gtest/gtest.h>

#include <regex>

#include "textrec/synthetic.hpp"

using namespace textrec;

namespace {

// five items with one-word titles, category "cat"
Catalog small_catalog() {
    Catalog cat;
    static const char* words[] = {"alpha", "bravo", "charlie", "delta", "echo"};
    for (int i = 0; i < 5; ++i) {
        Item it;
        it.item_id = "i" + std::to_string(i);
        it.domain = "d0";
        it.category = "cat";
        it.title = words[i];
        it.brand = "brandword";
        it.price = 5.0;
        it.description = "descword one";
        cat.add(it);
    }
    return cat;
}

UserSequence five_items() { return {"u0", {"i0", "i1", "i2", "i3", "i4"}}; }

Vocabulary vocab_for(const Catalog& cat) { return build_pipeline_vocab(cat, 1, 50000); }

TrainConfig pretrain_cfg() {
    TrainConfig cfg;
    cfg.stage = Stage::pretrain;
    return cfg;
}

}  // namespace

TEST(MitpSample, ForcedLastMaskLayout) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::pretrain);
    TrainConfig cfg = pretrain_cfg();
    cfg.last_only_fraction = 1.0;
    Rng rng(1);
    auto sample = build_mitp_sample(five_items(), cat, tcfg, vocab, cfg, rng);

    EXPECT_TRUE(sample.last_only);
    EXPECT_EQ(sample.masked_positions, (std::vector<std::size_t>{4}));
    EXPECT_EQ(decode(vocab, sample.encoder_ids),
              "given the following purchase history of user : ( category : cat ) alpha , ( category : cat ) bravo , "
              "( category : cat ) charlie , ( category : cat ) delta , <extra_id_0> , predict masked item purchased "
              "by the user ?");
    // target: sentinel, masked item's text tokens, EOS
    std::vector<int> expected = {Vocabulary::sentinel_id(0)};
    for (int id : encode(vocab, "( category : cat ) echo")) expected.push_back(id);
    expected.push_back(Vocabulary::kEos);
    EXPECT_EQ(sample.target_ids, expected);
}

TEST(MitpSample, MultiMaskTargetLayout) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::pretrain);
    TrainConfig cfg = pretrain_cfg();
    cfg.last_only_fraction = 0.0;
    cfg.mask_ratio = 0.4;
    // search for a seed whose Bernoulli draws mask exactly positions {1, 3}
    for (std::uint64_t seed = 0; seed < 4000; ++seed) {
        Rng rng(seed);
        auto sample = build_mitp_sample(five_items(), cat, tcfg, vocab, cfg, rng);
        if (sample.masked_positions == std::vector<std::size_t>{1, 3}) {
            std::vector<int> expected = {Vocabulary::sentinel_id(0)};
            for (int id : encode(vocab, "( category : cat ) bravo")) expected.push_back(id);
            expected.push_back(Vocabulary::sentinel_id(1));
            for (int id : encode(vocab, "( category : cat ) delta")) expected.push_back(id);
            expected.push_back(Vocabulary::kEos);
            EXPECT_EQ(sample.target_ids, expected);
            const std::string enc_text = decode(vocab, sample.encoder_ids);
            EXPECT_NE(enc_text.find("alpha , <extra_id_0> , ( category : cat ) charlie , <extra_id_1> ,"),
                      std::string::npos);
            return;
        }
    }
    FAIL() << "no seed produced mask set {1,3}";
}

TEST(MitpSample, MatchesStringLevelAssembly) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::finetune);
    TrainConfig cfg = pretrain_cfg();
    cfg.stage = Stage::finetune;
    cfg.last_only_fraction = 1.0;
    Rng rng(3);
    auto sample = build_mitp_sample(five_items(), cat, tcfg, vocab, cfg, rng);

    // same sample assembled at the string level through sequence_text
    std::vector<std::string> texts;
    for (const auto& id : five_items().items) {
        auto toks = item_tokens(cat.at(id), tcfg, vocab);
        texts.push_back(decode(vocab, toks));
    }
    const std::string assembled = sequence_text(texts, {4}, tcfg);
    EXPECT_EQ(sample.encoder_ids, encode(vocab, assembled));
}

TEST(MitpSample, ShortSequenceRejected) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::pretrain);
    TrainConfig cfg = pretrain_cfg();
    Rng rng(1);
    UserSequence seq{"u", {"i0"}};
    EXPECT_THROW(build_mitp_sample(seq, cat, tcfg, vocab, cfg, rng), std::runtime_error);
}

TEST(MitpSample, PerItemCapTruncates) {
    Catalog cat;
    Item big;
    big.item_id = "big";
    big.domain = "d0";
    big.category = "cat";
    std::string title;
    for (int i = 0; i < 60; ++i) title += "w" + std::to_string(i) + " ";
    big.title = title;
    cat.add(big);
    Item small;
    small.item_id = "small";
    small.domain = "d0";
    small.category = "cat";
    small.title = "tiny";
    cat.add(small);
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::pretrain);
    EXPECT_EQ(item_tokens(cat.at("big"), tcfg, vocab).size(), 40u);
    EXPECT_LT(item_tokens(cat.at("small"), tcfg, vocab).size(), 10u);
}

TEST(MitpSample, SequenceCapDropsOldestUnmaskedNeverMasked) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::pretrain);
    tcfg.sequence_token_cap = 40;  // item segments are 6 tokens each + prompt
    TrainConfig cfg = pretrain_cfg();
    cfg.last_only_fraction = 0.0;
    cfg.mask_ratio = 1e-12;  // floor forces the last item masked
    Rng rng(1);
    auto sample = build_mitp_sample(five_items(), cat, tcfg, vocab, cfg, rng);
    EXPECT_EQ(sample.masked_positions, (std::vector<std::size_t>{4}));
    EXPECT_LE(sample.encoder_ids.size(), 40u);
    const std::string text = decode(vocab, sample.encoder_ids);
    EXPECT_NE(text.find("<extra_id_0>"), std::string::npos);   // masked slot kept
    EXPECT_EQ(text.find("alpha"), std::string::npos);          // oldest dropped
    EXPECT_NE(text.find("delta"), std::string::npos);          // recent kept
}

TEST(MitpSample, ImpossibleCapIsError) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::pretrain);
    tcfg.sequence_token_cap = 10;  // smaller than prompt + one sentinel
    TrainConfig cfg = pretrain_cfg();
    cfg.last_only_fraction = 1.0;
    Rng rng(1);
    EXPECT_THROW(build_mitp_sample(five_items(), cat, tcfg, vocab, cfg, rng), std::runtime_error);
}

TEST(MitpSample, MaskingStatisticsOverTenThousandSamples) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::pretrain);
    TrainConfig cfg = pretrain_cfg();  // mask_ratio 0.1, last_only_fraction 0.1
    Rng rng(2024);
    const int n = 10000;
    int last_only = 0;
    for (int i = 0; i < n; ++i) {
        auto sample = build_mitp_sample(five_items(), cat, tcfg, vocab, cfg, rng);
        if (sample.last_only) ++last_only;
        ASSERT_GE(sample.masked_positions.size(), 1u);
        // sentinel pairing: encoder sentinels appear once each, in order, and
        // match the target's sentinels
        std::vector<int> enc_sent, tgt_sent;
        for (int id : sample.encoder_ids)
            if (Vocabulary::is_sentinel(id)) enc_sent.push_back(id);
        for (int id : sample.target_ids)
            if (Vocabulary::is_sentinel(id)) tgt_sent.push_back(id);
        ASSERT_EQ(enc_sent, tgt_sent);
        ASSERT_EQ(enc_sent.size(), sample.masked_positions.size());
        for (std::size_t s = 0; s < enc_sent.size(); ++s) ASSERT_EQ(enc_sent[s], Vocabulary::sentinel_id(static_cast<int>(s)));
        ASSERT_EQ(sample.target_ids.back(), Vocabulary::kEos);
    }
    const double fraction = static_cast<double>(last_only) / n;
    EXPECT_GE(fraction, 0.08);
    EXPECT_LE(fraction, 0.12);
}

TEST(MitpSample, PromptGrammarRoundTrip) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    auto tcfg = default_config(Stage::pretrain);
    TrainConfig cfg = pretrain_cfg();
    Rng rng(77);
    const std::regex grammar("^given the following purchase history of user : .* , predict masked item purchased by "
                             "the user \\?$");
    for (int i = 0; i < 50; ++i) {
        auto sample = build_mitp_sample(five_items(), cat, tcfg, vocab, cfg, rng);
        EXPECT_TRUE(std::regex_match(decode(vocab, sample.encoder_ids), grammar));
    }
}

TEST(MitpSample, PretrainStageOmitsDomainPropertyText) {
    Catalog cat = small_catalog();
    Vocabulary vocab = vocab_for(cat);
    const int brand_id = vocab.id_of("brandword");
    const int desc_id = vocab.id_of("descword");
    ASSERT_GT(brand_id, 0);
    ASSERT_GT(desc_id, 0);
    TrainConfig cfg = pretrain_cfg();
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
        auto sample = build_mitp_sample(five_items(), cat, default_config(Stage::pretrain), vocab, cfg, rng);
        for (int id : sample.encoder_ids) {
            EXPECT_NE(id, brand_id);
            EXPECT_NE(id, desc_id);
        }
        for (int id : sample.target_ids) {
            EXPECT_NE(id, brand_id);
            EXPECT_NE(id, desc_id);
        }
    }
    // fine-tune stage may contain them
    Rng rng2(5);
    auto sample = build_mitp_sample(five_items(), cat, default_config(Stage::finetune), vocab, cfg, rng2);
    bool found = false;
    for (int id : sample.encoder_ids)
        if (id == brand_id) found = true;
    EXPECT_TRUE(found);
}

// ---------------------------------------------------------------------------
// training stream
// ---------------------------------------------------------------------------

namespace {

Dataset stream_dataset(const std::string& domain, int users, int interactions_per_user) {
    Dataset ds;
    ds.domain = domain;
    for (int i = 0; i < 4; ++i) {
        Item it;
        it.item_id = domain + "_i" + std::to_string(i);
        it.domain = domain;
        it.category = "c";
        it.title = "t" + std::to_string(i);
        ds.catalog.add(it);
    }
    for (int u = 0; u < users; ++u) {
        UserSequence s;
        s.user_id = domain + "_u" + std::to_string(u);
        for (int i = 0; i < interactions_per_user; ++i) s.items.push_back(domain + "_i" + std::to_string(i % 4));
        ds.sequences.push_back(std::move(s));
    }
    return ds;
}

}  // namespace

TEST(TrainingStream, ZeroWeightDomainExcluded) {
    std::vector<Dataset> ds{stream_dataset("A", 10, 5), stream_dataset("B", 10, 5)};
    TrainConfig cfg;
    cfg.seed = 3;
    cfg.domain_weights = {{"A", 1.0}, {"B", 0.0}};
    auto plan = epoch_plan(ds, cfg, 1);
    EXPECT_EQ(plan.size(), 10u);
    for (const auto& [d, u] : plan) EXPECT_EQ(d, 0u);
}

TEST(TrainingStream, SameSeedSamePlan) {
    std::vector<Dataset> ds{stream_dataset("A", 10, 5), stream_dataset("B", 20, 5)};
    TrainConfig cfg;
    cfg.seed = 11;
    EXPECT_EQ(epoch_plan(ds, cfg, 1), epoch_plan(ds, cfg, 1));
    EXPECT_NE(epoch_plan(ds, cfg, 1), epoch_plan(ds, cfg, 2));
}

TEST(TrainingStream, DefaultWeightsProportionalToInteractions) {
    // domain A: 100 interactions; domain B: 300 -> expected shares 25% / 75%
    std::vector<Dataset> ds{stream_dataset("A", 20, 5), stream_dataset("B", 60, 5)};
    TrainConfig cfg;
    cfg.seed = 1234;
    std::size_t total = 0, from_a = 0;
    for (int epoch = 1; total < 10000; ++epoch) {
        for (const auto& [d, u] : epoch_plan(ds, cfg, epoch)) {
            ++total;
            if (d == 0) ++from_a;
        }
    }
    const double share = static_cast<double>(from_a) / static_cast<double>(total);
    EXPECT_NEAR(share, 0.25, 0.03);
}

// ---------------------------------------------------------------------------
// pretrain / finetune loops
// ---------------------------------------------------------------------------

namespace {

struct TinyPipeline {
    std::vector<Dataset> datasets;
    Vocabulary vocab;
    ModelConfig mcfg;
    TextualizationConfig tcfg;
    TrainConfig cfg;
};

TinyPipeline tiny_pipeline(std::uint64_t seed) {
    SyntheticConfig scfg;
    scfg.n_domains = 2;
    scfg.n_users = 12;
    scfg.n_items_per_domain = 16;
    scfg.n_clusters_per_domain = 2;
    scfg.seq_len_min = 4;
    scfg.seq_len_max = 6;
    scfg.seed = seed;
    auto synth = generate_synthetic(scfg);
    Dataset all;
    all.catalog = synth.catalog;
    std::map<std::string, UserSequence> seqs;
    std::vector<std::string> order;
    for (const auto& ev : synth.interactions) {
        if (!seqs.count(ev.user_id)) {
            order.push_back(ev.user_id);
            seqs[ev.user_id].user_id = ev.user_id;
        }
        seqs[ev.user_id].items.push_back(ev.item_id);
    }
    for (const auto& u : order) all.sequences.push_back(seqs[u]);

    TinyPipeline p;
    p.datasets = partition_by_domain(all);
    p.vocab = build_pipeline_vocab(all.catalog, 1, 50000);
    p.mcfg.n_layers = 1;
    p.mcfg.n_heads = 2;
    p.mcfg.d_model = 16;
    p.mcfg.d_ff = 32;
    p.mcfg.vocab_size = p.vocab.size();
    p.mcfg.max_positions = 128;
    p.mcfg.seed = 9;
    p.tcfg = default_config(Stage::pretrain);
    p.cfg.batch_size = 8;
    p.cfg.epochs = 2;
    p.cfg.seed = 5;
    return p;
}

}  // namespace

TEST(Pretrain, ZeroEpochsReturnsInitUnchanged) {
    auto p = tiny_pipeline(21);
    p.cfg.epochs = 0;
    TrainerState<float> st{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};
    auto init_copy = st.params;
    auto logs = pretrain(st, p.datasets, p.cfg, p.tcfg, p.vocab);
    EXPECT_TRUE(logs.empty());
    auto a = st.params.tensors();
    auto b = init_copy.tensors();
    for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(a[t].second->data, b[t].second->data);
}

TEST(Pretrain, DeterministicAcrossRuns) {
    auto p = tiny_pipeline(22);
    TrainerState<float> st1{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};
    TrainerState<float> st2{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};
    auto logs1 = pretrain(st1, p.datasets, p.cfg, p.tcfg, p.vocab);
    auto logs2 = pretrain(st2, p.datasets, p.cfg, p.tcfg, p.vocab);
    ASSERT_EQ(logs1.size(), logs2.size());
    for (std::size_t i = 0; i < logs1.size(); ++i) EXPECT_EQ(logs1[i].mean_loss, logs2[i].mean_loss);
    auto a = st1.params.tensors();
    auto b = st2.params.tensors();
    for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(a[t].second->data, b[t].second->data) << a[t].first;
}

TEST(Pretrain, ResumeMatchesUninterrupted) {
    auto p = tiny_pipeline(23);
    p.cfg.epochs = 3;
    TrainerState<float> straight{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};
    pretrain(straight, p.datasets, p.cfg, p.tcfg, p.vocab);

    TrainerState<float> resumed{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};
    TrainConfig first = p.cfg;
    first.epochs = 2;
    pretrain(resumed, p.datasets, first, p.tcfg, p.vocab);
    EXPECT_EQ(resumed.epochs_done, 2);
    pretrain(resumed, p.datasets, p.cfg, p.tcfg, p.vocab);  // continues at epoch 3
    EXPECT_EQ(resumed.epochs_done, 3);

    auto a = straight.params.tensors();
    auto b = resumed.params.tensors();
    for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(a[t].second->data, b[t].second->data) << a[t].first;
}

TEST(Pretrain, LossIsFinite) {
    auto p = tiny_pipeline(24);
    TrainerState<float> st{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};
    auto logs = pretrain(st, p.datasets, p.cfg, p.tcfg, p.vocab);
    ASSERT_EQ(logs.size(), 2u);
    for (const auto& log : logs) EXPECT_TRUE(std::isfinite(log.mean_loss));
}

TEST(Finetune, EarlyStopReturnsBestCheckpoint) {
    auto p = tiny_pipeline(25);
    p.cfg.epochs = 10;
    p.cfg.patience = 1;
    TrainerState<float> st{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};

    std::vector<Parameters<float>> snapshots;
    const double scores[] = {0.5, 0.4, 0.3, 0.2};
    auto validator = [&](const Parameters<float>& params) {
        snapshots.push_back(params);
        return scores[snapshots.size() - 1];
    };
    auto logs = finetune<float>(st, p.datasets[0], p.cfg, p.tcfg, p.vocab, validator);
    // patience 1, strictly decreasing from epoch 2: stops after epoch 2
    ASSERT_EQ(logs.size(), 2u);
    EXPECT_EQ(*logs[0].valid_ndcg10, 0.5);
    EXPECT_EQ(*logs[1].valid_ndcg10, 0.4);
    auto a = st.params.tensors();
    auto b = snapshots[0].tensors();
    for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(a[t].second->data, b[t].second->data);
}

TEST(Finetune, KeepsBestNotLast) {
    auto p = tiny_pipeline(26);
    p.cfg.epochs = 5;
    p.cfg.patience = 3;
    TrainerState<float> st{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};
    std::vector<Parameters<float>> snapshots;
    const double scores[] = {0.3, 0.7, 0.5, 0.6, 0.2};
    auto validator = [&](const Parameters<float>& params) {
        snapshots.push_back(params);
        return scores[snapshots.size() - 1];
    };
    auto logs = finetune<float>(st, p.datasets[0], p.cfg, p.tcfg, p.vocab, validator);
    ASSERT_EQ(logs.size(), 5u);
    // best was epoch 2; returned checkpoint's validation score dominates the log
    auto a = st.params.tensors();
    auto b = snapshots[1].tensors();
    for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(a[t].second->data, b[t].second->data);
    double best = -1;
    for (const auto& log : logs) best = std::max(best, *log.valid_ndcg10);
    EXPECT_EQ(best, 0.7);
}

TEST(Finetune, FromScratchSupported) {
    auto p = tiny_pipeline(27);
    p.cfg.epochs = 1;
    TrainerState<float> st{init_params<float>(p.mcfg), AdamWState<float>::init(p.mcfg), 0};
    auto logs = finetune<float>(st, p.datasets[0], p.cfg, p.tcfg, p.vocab,
                                [](const Parameters<float>&) { return 0.1; });
    EXPECT_EQ(logs.size(), 1u);
}
