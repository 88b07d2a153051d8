#include <map>

#include <gtest/gtest.h>

#include "gto/tree_policy.hpp"
#include "test_support.hpp"

namespace gto {
namespace {

using testing::FnModel;

// Toy drafter from the "It is a / It has to" illustration.
enum Word : Token { kIt, kIs, kHas, kA, kThe, kTo, kBeen, kStop, kWords };

FnModel toy_drafter() {
  return FnModel(kWords, [](ContextView ctx) {
    std::vector<double> p(kWords, 0.0);
    switch (ctx.back()) {
      case kIt: p[kIs] = 0.6; p[kHas] = 0.4; break;
      case kIs: p[kA] = 0.6; p[kThe] = 0.4; break;
      case kHas: p[kTo] = 0.95; p[kBeen] = 0.05; break;
      default: p[kStop] = 1.0; break;
    }
    return p;
  });
}

const TokenSeq kRootCtx{kIt};

double confidence_of(const DraftTree& tree, const TokenSeq& prefix) {
  for (std::size_t i = 0; i < tree.nodes().size(); ++i) {
    if (tree.path_to(static_cast<int>(i)) == prefix) return tree.nodes()[i].path_confidence;
  }
  return -1.0;
}

TEST(ToyTree, ConfidencesAndGreedyPruning) {
  const auto draft = toy_drafter();
  const auto tree = build_draft_tree(draft, kRootCtx, {3, 2, 1, std::nullopt});
  ASSERT_EQ(tree.branches().size(), 1u);
  EXPECT_EQ(tree.branches()[0].tokens, (TokenSeq{kHas, kTo, kStop}));
  EXPECT_NEAR(tree.branches()[0].confidence, 0.38, 1e-12);
  EXPECT_EQ(tree.greedy_path(), (TokenSeq{kIs, kA, kStop}));
  EXPECT_FALSE(greedy_branch(tree).has_value());
}

TEST(ToyTree, WiderLeafBudgetKeepsBothAndOrdersByConfidence) {
  const auto draft = toy_drafter();
  const auto tree = build_draft_tree(draft, kRootCtx, {3, 2, 4, std::nullopt});
  const auto entries = enumerate_branches(tree);
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].tokens, (TokenSeq{kHas, kTo, kStop}));
  EXPECT_EQ(entries[1].tokens, (TokenSeq{kIs, kA, kStop}));
  EXPECT_NEAR(entries[0].confidence, 0.38, 1e-12);
  EXPECT_NEAR(entries[1].confidence, 0.36, 1e-12);
  EXPECT_NEAR(confidence_of(tree, {kIs, kA}), 0.36, 1e-12);
  EXPECT_NEAR(confidence_of(tree, {kHas, kTo}), 0.38, 1e-12);
  EXPECT_NEAR(confidence_of(tree, {kIs}), 0.6, 1e-12);
  ASSERT_TRUE(greedy_branch(tree).has_value());
  EXPECT_EQ(*greedy_branch(tree), 1u);
}

FnModel one_hot_drafter(int vocab) {
  return FnModel(vocab, [vocab](ContextView ctx) {
    std::vector<double> p(static_cast<std::size_t>(vocab), 0.0);
    p[static_cast<std::size_t>((ctx.back() * 3 + 1) % vocab)] = 1.0;
    return p;
  });
}

TEST(BuildDraftTree, OneHotDrafterGivesSingleBranch) {
  const auto draft = one_hot_drafter(5);
  const TokenSeq ctx{2};
  for (int k : {1, 2, 5}) {
    const auto tree = build_draft_tree(draft, ctx, {3, k, 4, std::nullopt});
    const auto entries = enumerate_branches(tree);
    ASSERT_EQ(entries.size(), 1u);
    EXPECT_EQ(entries[0].length, 3u);
    EXPECT_EQ(entries[0].confidence, 1.0);
    ASSERT_TRUE(greedy_branch(tree).has_value());
    EXPECT_EQ(*greedy_branch(tree), 0u);
  }
}

TEST(BuildDraftTree, EqualConfidenceBranchesInLexicographicOrder) {
  const FnModel uniform(3, [](ContextView) { return std::vector<double>(3, 1.0 / 3.0); });
  const TokenSeq ctx{0};
  const TreePolicyConfig cfg{2, 3, 9, std::nullopt};
  const auto tree = build_draft_tree(uniform, ctx, cfg);
  const auto entries = enumerate_branches(tree);
  ASSERT_EQ(entries.size(), 3u);
  EXPECT_EQ(entries[0].tokens, (TokenSeq{0, 0}));
  EXPECT_EQ(entries[1].tokens, (TokenSeq{1, 0}));
  EXPECT_EQ(entries[2].tokens, (TokenSeq{2, 0}));
  for (int run = 0; run < 3; ++run) {
    EXPECT_EQ(dump_tree_adjacency(build_draft_tree(uniform, ctx, cfg)), dump_tree_adjacency(tree));
  }
}

TEST(BuildDraftTree, SymmetricDrafterGreedyPathUsesLowestIds) {
  const FnModel uniform(3, [](ContextView) { return std::vector<double>(3, 1.0 / 3.0); });
  const TokenSeq ctx{1};
  const auto tree = build_draft_tree(uniform, ctx, {2, 2, 1, std::nullopt});
  EXPECT_EQ(tree.greedy_path(), (TokenSeq{0, 0}));
  ASSERT_TRUE(greedy_branch(tree).has_value());
  EXPECT_EQ(tree.branches()[*greedy_branch(tree)].tokens, (TokenSeq{0, 0}));
}

TEST(BuildDraftTree, SymmetricDrafterGreedyPathAbsentWhenPruned) {
  // Token 0 leads to a flat row, token 1 to a peaked one; the greedy
  // chain starts with 0 by tie-break but its children score lower.
  const FnModel draft(3, [](ContextView ctx) {
    if (ctx.size() == 1) return std::vector<double>{0.5, 0.5, 0.0};
    if (ctx.back() == 0) return std::vector<double>{0.4, 0.3, 0.3};
    return std::vector<double>{0.1, 0.9, 0.0};
  });
  const TokenSeq ctx{2};
  const auto tree = build_draft_tree(draft, ctx, {2, 2, 1, std::nullopt});
  EXPECT_EQ(tree.greedy_path(), (TokenSeq{0, 0}));
  EXPECT_FALSE(greedy_branch(tree).has_value());
  EXPECT_EQ(tree.branches()[0].tokens, (TokenSeq{1, 1}));
}

TEST(BuildDraftTree, MatchesBruteForceOracle) {
  Rng rng(31);
  int checked = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const int v = 2 + static_cast<int>(rng.uniform_int(3));
    const auto draft = testing::random_tabular(v, 1 + static_cast<int>(rng.uniform_int(2)), rng);
    TreePolicyConfig cfg;
    cfg.depth = 1 + static_cast<int>(rng.uniform_int(3));
    cfg.layer_topk = 1 + static_cast<int>(rng.uniform_int(3));
    cfg.leaf_budget = 1 + static_cast<int>(rng.uniform_int(6));
    cfg.token_budget = std::nullopt;
    if (rng.uniform() < 0.3) cfg.token_budget = cfg.depth + static_cast<int>(rng.uniform_int(4));
    const auto ctx = testing::random_tokens(v, 1 + rng.uniform_int(3), rng);

    const auto tree = build_draft_tree(draft, ctx, cfg);
    const auto oracle = testing::brute_force_tree(draft, ctx, cfg);
    ASSERT_EQ(tree.branches().size(), oracle.size()) << "trial " << trial;
    for (std::size_t i = 0; i < oracle.size(); ++i) {
      EXPECT_EQ(tree.branches()[i].tokens, oracle[i].tokens) << "trial " << trial;
      EXPECT_DOUBLE_EQ(tree.branches()[i].confidence, oracle[i].confidence);
    }
    ++checked;
  }
  EXPECT_EQ(checked, 400);
}

TEST(BuildDraftTree, SmallExampleMatchesOracle) {
  Rng rng(5);
  const auto draft = testing::random_tabular(3, 1, rng);
  const TokenSeq ctx{1};
  const TreePolicyConfig cfg{2, 2, 2, std::nullopt};
  const auto tree = build_draft_tree(draft, ctx, cfg);
  const auto oracle = testing::brute_force_tree(draft, ctx, cfg);
  ASSERT_EQ(tree.branches().size(), oracle.size());
  for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_EQ(tree.branches()[i].tokens, oracle[i].tokens);
}

TEST(BuildDraftTree, StructuralInvariants) {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const auto draft = testing::random_tabular(6, 2, rng);
    TreePolicyConfig cfg;
    cfg.depth = 1 + static_cast<int>(rng.uniform_int(5));
    cfg.layer_topk = 1 + static_cast<int>(rng.uniform_int(6));
    cfg.leaf_budget = 1 + static_cast<int>(rng.uniform_int(10));
    cfg.token_budget = cfg.depth + static_cast<int>(rng.uniform_int(12));
    const auto ctx = testing::random_tokens(6, 4, rng);
    const auto tree = build_draft_tree(draft, ctx, cfg);

    EXPECT_LE(tree.branches().size(), static_cast<std::size_t>(cfg.leaf_budget));
    EXPECT_LE(tree.size(), static_cast<std::size_t>(*cfg.token_budget));
    std::map<int, int> per_layer;
    for (const auto& n : tree.nodes()) {
      ++per_layer[n.depth];
      if (n.parent != kRootParent) {
        const auto& p = tree.nodes()[static_cast<std::size_t>(n.parent)];
        EXPECT_LT(n.parent, static_cast<int>(&n - tree.nodes().data()));
        EXPECT_EQ(p.depth + 1, n.depth);
        EXPECT_LE(n.path_confidence, p.path_confidence);
        EXPECT_DOUBLE_EQ(n.path_confidence, p.path_confidence * n.draft_prob);
      } else {
        EXPECT_EQ(n.depth, 1);
      }
    }
    for (const auto& [layer, count] : per_layer) EXPECT_LE(count, cfg.layer_topk);
    for (std::size_t i = 1; i < tree.branches().size(); ++i) {
      EXPECT_GE(tree.branches()[i - 1].confidence, tree.branches()[i].confidence);
    }
    for (const auto& b : tree.branches()) {
      EXPECT_EQ(tree.path_to(b.leaf), b.tokens);
      EXPECT_LE(b.tokens.size(), static_cast<std::size_t>(cfg.depth));
    }
    EXPECT_EQ(tree.greedy_path().size(), static_cast<std::size_t>(tree.expanded_depth()));
    EXPECT_EQ(dump_tree_adjacency(build_draft_tree(draft, ctx, cfg)), dump_tree_adjacency(tree));
  }
}

TEST(BuildDraftTree, EveryRetainedNodeLiesOnABranch) {
  Rng rng(12);
  const auto draft = testing::random_tabular(5, 1, rng);
  const TokenSeq ctx{3};
  const auto tree = build_draft_tree(draft, ctx, {4, 4, 3, std::nullopt});
  std::vector<bool> used(tree.size(), false);
  for (const auto& b : tree.branches()) {
    for (int i = b.leaf; i != kRootParent; i = tree.nodes()[static_cast<std::size_t>(i)].parent) {
      used[static_cast<std::size_t>(i)] = true;
    }
  }
  for (bool u : used) EXPECT_TRUE(u);
}

TEST(TreePolicyConfig, RejectsInvalidSettings) {
  EXPECT_THROW((TreePolicyConfig{0, 1, 1, std::nullopt}.validate()), std::invalid_argument);
  EXPECT_THROW((TreePolicyConfig{2, 0, 1, std::nullopt}.validate()), std::invalid_argument);
  EXPECT_THROW((TreePolicyConfig{2, 1, 0, std::nullopt}.validate()), std::invalid_argument);
  EXPECT_THROW((TreePolicyConfig{4, 1, 1, 3}.validate()), std::invalid_argument);
  EXPECT_NO_THROW(TreePolicyConfig{}.validate());
  EXPECT_EQ(TreePolicyConfig{}.depth, 7);
  EXPECT_EQ(TreePolicyConfig{}.layer_topk, 10);
  EXPECT_EQ(TreePolicyConfig{}.leaf_budget, 60);
  EXPECT_EQ(TreePolicyConfig{}.token_budget, 60);
}

TEST(DumpTree, TextListsEveryNode) {
  const auto draft = toy_drafter();
  const auto tree = build_draft_tree(draft, kRootCtx, {3, 2, 4, std::nullopt});
  const auto text = dump_tree_text(tree);
  std::size_t lines = 0;
  for (char c : text) lines += c == '\n';
  EXPECT_EQ(lines, tree.size() + 1);
  EXPECT_NE(text.find("c=0.38"), std::string::npos);
}

}  // namespace
}  // namespace gto
