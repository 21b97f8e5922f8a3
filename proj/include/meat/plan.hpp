#pragma once

#include <string>

#include "meat/continual.hpp"

namespace meat {

// Parse an experiment plan from its JSON text. Key set:
//   model.{image_size,patch_size,channels,embed_dim,heads,layers,ffn_hidden}
//   meat.{gamma,alpha,lambda,tau,anneal_tau}
//   train.{optimizer,seeds,orders,order_seed,method}
//   base.{family,classes,n_train,n_test,epochs,batch,lr,seed,palette,noise,jitter}
//   tasks[].{family,classes,n_train,n_test,epochs,batch,classifier_lr,mask_lr,
//            seed,palette,noise,jitter}
// Missing required keys and malformed values raise ConfigError naming the key.
ExperimentPlan plan_from_json(const std::string& text);

ExperimentPlan load_plan(const std::string& path);

}  // namespace meat
