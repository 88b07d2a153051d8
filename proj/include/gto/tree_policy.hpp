#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "gto/lm_core.hpp"

namespace gto {

struct TreePolicyConfig {
  int depth = 7;        ///< d: number of expansion layers
  int layer_topk = 10;  ///< k: expansions kept per layer, across the whole layer
  int leaf_budget = 60; ///< g: leaves kept after re-ranking
  std::optional<int> token_budget = 60;  ///< cap on total tree nodes

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
};

inline constexpr int kRootParent = -1;

struct DraftNode {
  Token token = 0;
  int parent = kRootParent;  ///< index into DraftTree::nodes(), or kRootParent
  double draft_prob = 0.0;   ///< draft probability of `token` given its path
  double path_confidence = 0.0;
  int depth = 0;             ///< 1 for children of the root
};

struct Branch {
  TokenSeq tokens;
  double confidence = 0.0;
  int leaf = 0;  ///< node index of the branch leaf
};

/// Draft tree after expansion and leaf pruning. Immutable once built.
///
/// nodes() holds only nodes on retained root-to-leaf paths, parents before
/// children. branches() is ordered by descending confidence, ties broken by
/// lexicographic token order.
class DraftTree {
 public:
  DraftTree(std::vector<DraftNode> nodes, std::vector<Branch> branches, TokenSeq greedy_path,
            int expanded_depth);

  const std::vector<DraftNode>& nodes() const { return nodes_; }
  const std::vector<Branch>& branches() const { return branches_; }
  std::size_t size() const { return nodes_.size(); }

  /// Argmax chain of the drafter, as long as the deepest layer expanded.
  const TokenSeq& greedy_path() const { return greedy_path_; }
  int expanded_depth() const { return expanded_depth_; }
  std::size_t max_branch_length() const;

  TokenSeq path_to(int node) const;

 private:
  std::vector<DraftNode> nodes_;
  std::vector<Branch> branches_;
  TokenSeq greedy_path_;
  int expanded_depth_ = 0;
};

/// Two-stage drafting policy: layer-wise global top-k by path confidence,
/// then top-g leaf re-ranking. Ties: confidence, then single-step draft
/// probability, then lower token id, then older parent.
DraftTree build_draft_tree(const ConditionalModel& draft, ContextView ctx,
                           const TreePolicyConfig& cfg);

struct BranchEntry {
  TokenSeq tokens;
  std::size_t length = 0;
  double confidence = 0.0;
};

std::vector<BranchEntry> enumerate_branches(const DraftTree& tree);

/// Index of the branch equal to the drafter's greedy path, if it survived pruning.
std::optional<std::size_t> greedy_branch(const DraftTree& tree);

/// Indented one-node-per-line rendering, e.g. "  3 p=0.6 c=0.36".
std::string dump_tree_text(const DraftTree& tree);
/// One line per node: "index parent token draft_prob confidence" (hex floats).
std::string dump_tree_adjacency(const DraftTree& tree);

}  // namespace gto
