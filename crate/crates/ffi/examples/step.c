#include "bfflow.h"
#include <stdio.h>
int main(void){ BfConfig *c=0; BfStatus s=bf_config_parse("[grid]\nn = 8\n",&c); BfSimulation *sim=0; s=bf_sim_new(c,1.0,&sim); bf_sim_advance(sim,5); printf("%d t=%g e=%g\n",s,bf_sim_time(sim),bf_sim_energy(sim)); bf_sim_free(sim); bf_config_free(c); return 0;}
