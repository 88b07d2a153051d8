#include "gto/tree_policy.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "gto/model_io.hpp"

namespace gto {

void TreePolicyConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("tree depth must be >= 1");
  if (layer_topk < 1) throw std::invalid_argument("layer top-k must be >= 1");
  if (leaf_budget < 1) throw std::invalid_argument("leaf budget must be >= 1");
  if (token_budget && *token_budget < depth) {
    throw std::invalid_argument("token budget must be >= depth");
  }
}

DraftTree::DraftTree(std::vector<DraftNode> nodes, std::vector<Branch> branches,
                     TokenSeq greedy_path, int expanded_depth)
    : nodes_(std::move(nodes)),
      branches_(std::move(branches)),
      greedy_path_(std::move(greedy_path)),
      expanded_depth_(expanded_depth) {}

std::size_t DraftTree::max_branch_length() const {
  std::size_t n = 0;
  for (const auto& b : branches_) n = std::max(n, b.tokens.size());
  return n;
}

TokenSeq DraftTree::path_to(int node) const {
  TokenSeq path;
  for (int i = node; i != kRootParent; i = nodes_[static_cast<std::size_t>(i)].parent) {
    path.push_back(nodes_[static_cast<std::size_t>(i)].token);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

namespace {

struct Candidate {
  int parent;
  Token token;
  double draft_prob;
  double confidence;
};

// Strict "ranks ahead of" for layer expansion.
bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.draft_prob != b.draft_prob) return a.draft_prob > b.draft_prob;
  if (a.token != b.token) return a.token < b.token;
  return a.parent < b.parent;
}

TokenSeq path_of(const std::vector<DraftNode>& nodes, int node) {
  TokenSeq path;
  for (int i = node; i != kRootParent; i = nodes[static_cast<std::size_t>(i)].parent) {
    path.push_back(nodes[static_cast<std::size_t>(i)].token);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

}  // namespace

DraftTree build_draft_tree(const ConditionalModel& draft, ContextView ctx,
                           const TreePolicyConfig& cfg) {
  cfg.validate();
  validate_context(draft, ctx);

  const Temperature unit(1.0);
  const std::size_t budget =
      cfg.token_budget ? static_cast<std::size_t>(*cfg.token_budget) : std::size_t(-1);

  std::vector<DraftNode> nodes;
  std::vector<int> frontier{kRootParent};
  TokenSeq scratch(ctx.begin(), ctx.end());
  int expanded_depth = 0;

  for (int layer = 1; layer <= cfg.depth && nodes.size() < budget; ++layer) {
    std::vector<Candidate> candidates;
    for (int parent : frontier) {
      scratch.resize(ctx.size());
      double parent_conf = 1.0;
      if (parent != kRootParent) {
        const auto path = path_of(nodes, parent);
        scratch.insert(scratch.end(), path.begin(), path.end());
        parent_conf = nodes[static_cast<std::size_t>(parent)].path_confidence;
      }
      const auto probs = draft.base_distribution(scratch);
      for (std::size_t v = 0; v < probs.size(); ++v) {
        if (probs[v] <= 0.0) continue;
        candidates.push_back({parent, static_cast<Token>(v), probs[v], parent_conf * probs[v]});
      }
    }
    if (candidates.empty()) break;

    const std::size_t keep = std::min({candidates.size(), static_cast<std::size_t>(cfg.layer_topk),
                                       budget - nodes.size()});
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), candidate_before);

    frontier.clear();
    for (std::size_t c = 0; c < keep; ++c) {
      const auto& cand = candidates[c];
      frontier.push_back(static_cast<int>(nodes.size()));
      nodes.push_back({cand.token, cand.parent, cand.draft_prob, cand.confidence, layer});
    }
    expanded_depth = layer;
  }

  // Leaves: nodes that received no children.
  std::vector<bool> has_child(nodes.size(), false);
  for (const auto& n : nodes) {
    if (n.parent != kRootParent) has_child[static_cast<std::size_t>(n.parent)] = true;
  }
  std::vector<int> leaves;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!has_child[i]) leaves.push_back(static_cast<int>(i));
  }
  std::stable_sort(leaves.begin(), leaves.end(), [&](int a, int b) {
    const auto& na = nodes[static_cast<std::size_t>(a)];
    const auto& nb = nodes[static_cast<std::size_t>(b)];
    if (na.path_confidence != nb.path_confidence) return na.path_confidence > nb.path_confidence;
    if (na.draft_prob != nb.draft_prob) return na.draft_prob > nb.draft_prob;
    if (na.token != nb.token) return na.token < nb.token;
    return a < b;
  });
  if (leaves.size() > static_cast<std::size_t>(cfg.leaf_budget)) {
    leaves.resize(static_cast<std::size_t>(cfg.leaf_budget));
  }

  // Keep only ancestors of retained leaves, preserving creation order.
  std::vector<bool> keep_node(nodes.size(), false);
  for (int leaf : leaves) {
    for (int i = leaf; i != kRootParent && !keep_node[static_cast<std::size_t>(i)];
         i = nodes[static_cast<std::size_t>(i)].parent) {
      keep_node[static_cast<std::size_t>(i)] = true;
    }
  }
  std::vector<int> remap(nodes.size(), kRootParent);
  std::vector<DraftNode> kept;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!keep_node[i]) continue;
    remap[i] = static_cast<int>(kept.size());
    DraftNode n = nodes[i];
    if (n.parent != kRootParent) n.parent = remap[static_cast<std::size_t>(n.parent)];
    kept.push_back(n);
  }

  std::vector<Branch> branches;
  branches.reserve(leaves.size());
  for (int leaf : leaves) {
    const int idx = remap[static_cast<std::size_t>(leaf)];
    branches.push_back({path_of(kept, idx), kept[static_cast<std::size_t>(idx)].path_confidence, idx});
  }
  std::sort(branches.begin(), branches.end(), [](const Branch& a, const Branch& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.tokens < b.tokens;
  });

  TokenSeq greedy;
  scratch.assign(ctx.begin(), ctx.end());
  for (int i = 0; i < expanded_depth; ++i) {
    const Token t = argmax_token(draft.base_distribution(scratch));
    greedy.push_back(t);
    scratch.push_back(t);
  }

  return DraftTree(std::move(kept), std::move(branches), std::move(greedy), expanded_depth);
}

std::vector<BranchEntry> enumerate_branches(const DraftTree& tree) {
  std::vector<BranchEntry> out;
  out.reserve(tree.branches().size());
  for (const auto& b : tree.branches()) out.push_back({b.tokens, b.tokens.size(), b.confidence});
  return out;
}

std::optional<std::size_t> greedy_branch(const DraftTree& tree) {
  const auto& branches = tree.branches();
  for (std::size_t i = 0; i < branches.size(); ++i) {
    if (branches[i].tokens == tree.greedy_path()) return i;
  }
  return std::nullopt;
}

std::string dump_tree_text(const DraftTree& tree) {
  const auto& nodes = tree.nodes();
  std::vector<std::vector<int>> children(nodes.size());
  std::vector<int> roots;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].parent == kRootParent) {
      roots.push_back(static_cast<int>(i));
    } else {
      children[static_cast<std::size_t>(nodes[i].parent)].push_back(static_cast<int>(i));
    }
  }
  std::ostringstream out;
  out << std::setprecision(6);
  out << "<root>\n";
  // Depth-first, children in creation order.
  std::vector<int> stack(roots.rbegin(), roots.rend());
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    const auto& n = nodes[static_cast<std::size_t>(i)];
    out << std::string(static_cast<std::size_t>(2 * n.depth), ' ') << n.token << " p=" << n.draft_prob
        << " c=" << n.path_confidence << '\n';
    const auto& kids = children[static_cast<std::size_t>(i)];
    stack.insert(stack.end(), kids.rbegin(), kids.rend());
  }
  return out.str();
}

std::string dump_tree_adjacency(const DraftTree& tree) {
  std::ostringstream out;
  const auto& nodes = tree.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    out << i << ' ' << n.parent << ' ' << n.token << ' ' << format_hex(n.draft_prob) << ' '
        << format_hex(n.path_confidence) << '\n';
  }
  return out.str();
}

}  // namespace gto
